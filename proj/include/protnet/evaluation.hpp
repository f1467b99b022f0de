#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/data.hpp"
#include "protnet/models.hpp"

namespace protnet {

/// PSNR of identical images.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

/// 100 * (#matches) / n.
double accuracy_percent(std::span<const int> predictions, std::span<const int> labels);

/// Predicted classes of psi(h(x)) for every image of `set`, eval mode.
std::vector<int> predict(const TransformNet<float>& h, const Classifier<float>& psi,
                         const ImageSet& set, std::size_t batch = 128);

double accuracy(const TransformNet<float>& h, const Classifier<float>& psi, const ImageSet& test);
double accuracy(const TransformNet<float>& h, const Classifier<float>& psi,
                std::span<const LabeledImage> test);

/// 10 log10(peak^2 / MSE); identical inputs give kPsnrInfinity.
double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak = 1.0);
/// Per-image PSNR of two equally shaped batches.
std::vector<double> psnr_per_image(const ImageBatch& a, const ImageBatch& b, double peak = 1.0);

struct BoxStats {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
  double whisker_low = 0.0, whisker_high = 0.0;
  std::size_t n = 0;         // finite values summarized
  std::size_t excluded = 0;  // infinite values left out
};

/// Sorted-order linear interpolation: position p*(n-1) between order
/// statistics.
double quantile_sorted(std::span<const double> sorted, double p);

BoxStats box_stats(std::span<const double> values);

struct EvalReport {
  std::optional<double> accuracy_percent;
  std::vector<double> psnr_values;
  BoxStats box;
  std::vector<std::string> grid_paths;
  std::string config_digest;
  double peak = 1.0;
};

nlohmann::json report_json(const EvalReport& r, const std::string& psnr_file = "");
/// Writes `<dir>/report.json` and `<dir>/psnr.txt` (one value per line,
/// "inf" for identical images).
void write_report(const std::filesystem::path& dir, const EvalReport& r);
void write_psnr_values(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_psnr_values(const std::filesystem::path& path);

/// PSNR of g(h(x)) against x for every image of `test`.
EvalReport evaluate_attack(const InverseNet<float>& g, const TransformNet<float>& h,
                           const ImageSet& test, double peak = 1.0);

struct GridRow {
  std::string label;
  std::vector<Tensor<float>> images;  // each [1, C, H, W]
};

struct Grid {
  std::vector<GridRow> rows;
};

/// Tiles the rows into one 16-bit PNG (row r, column i at (r*H, i*W)) and
/// stores the layout in a text chunk. Pixels are quantized to the 16-bit
/// lattice; values already on it (including every 8-bit value) reload
/// bit-exactly.
void export_grid(std::span<const GridRow> rows, const std::filesystem::path& path);
Grid read_grid(const std::filesystem::path& path);

}  // namespace protnet
