#include "protnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "protnet/attack.hpp"
#include "protnet/image_io.hpp"

namespace protnet {

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw DomainError("argmax: empty vector");
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;
  }
  return best;
}

double accuracy_percent(std::span<const int> predictions, std::span<const int> labels) {
  if (labels.empty()) throw DomainError("accuracy: empty test set");
  if (predictions.size() != labels.size()) {
    throw DomainError("accuracy: prediction and label counts differ");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<int> predict(const TransformNet<float>& h, const Classifier<float>& psi,
                         const ImageSet& set, std::size_t batch) {
  std::vector<int> out;
  out.reserve(set.size());
  for (std::size_t first = 0; first < set.size(); first += batch) {
    const std::size_t count = std::min(batch, set.size() - first);
    for (const auto& p : classify(psi, forward_transform(h, set.batch(first, count)))) {
      out.push_back(static_cast<int>(argmax(p)));
    }
  }
  return out;
}

double accuracy(const TransformNet<float>& h, const Classifier<float>& psi, const ImageSet& test) {
  if (test.size() == 0) throw DomainError("accuracy: empty test set");
  return accuracy_percent(predict(h, psi, test), test.labels);
}

double accuracy(const TransformNet<float>& h, const Classifier<float>& psi,
                std::span<const LabeledImage> test) {
  if (test.empty()) throw DomainError("accuracy: empty test set");
  std::vector<int> pred, labels;
  for (const auto& img : test) {
    pred.push_back(static_cast<int>(argmax(classify(psi, forward_transform(h, img.pixels)).front())));
    labels.push_back(img.label);
  }
  return accuracy_percent(pred, labels);
}

double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak) {
  require_same_shape(a.shape, b.shape, "psnr");
  if (!(peak > 0.0)) throw DomainError("psnr: peak must be > 0");
  if (a.size() == 0) throw DomainError("psnr: empty images");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(peak * peak / mse);
}

std::vector<double> psnr_per_image(const ImageBatch& a, const ImageBatch& b, double peak) {
  require_same_shape(a.shape, b.shape, "psnr");
  std::vector<double> out;
  out.reserve(a.shape.n);
  for (std::size_t i = 0; i < a.shape.n; ++i) {
    out.push_back(psnr(slice_batch(a, i, 1), slice_batch(b, i, 1), peak));
  }
  return out;
}

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw DomainError("quantile: empty input");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

BoxStats box_stats(std::span<const double> values) {
  BoxStats b;
  std::vector<double> v;
  v.reserve(values.size());
  for (double x : values) {
    if (std::isnan(x)) throw DomainError("box_stats: NaN value");
    if (std::isinf(x)) {
      ++b.excluded;
    } else {
      v.push_back(x);
    }
  }
  if (v.empty()) throw DomainError("box_stats: no finite values");
  std::sort(v.begin(), v.end());
  b.n = v.size();
  b.q1 = quantile_sorted(v, 0.25);
  b.median = quantile_sorted(v, 0.5);
  b.q3 = quantile_sorted(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  b.whisker_low = *std::lower_bound(v.begin(), v.end(), lo);
  b.whisker_high = *(std::upper_bound(v.begin(), v.end(), hi) - 1);
  return b;
}

// ------------------------------------------------------------ reports

nlohmann::json report_json(const EvalReport& r, const std::string& psnr_file) {
  nlohmann::json j;
  j["accuracy_percent"] =
      r.accuracy_percent ? nlohmann::json(*r.accuracy_percent) : nlohmann::json(nullptr);
  j["peak"] = r.peak;
  j["psnr_count"] = r.psnr_values.size();
  if (!psnr_file.empty()) j["psnr_values_file"] = psnr_file;
  if (!r.psnr_values.empty() && r.box.n > 0) {
    double mean = 0.0;
    for (double v : r.psnr_values) {
      if (std::isfinite(v)) mean += v;
    }
    j["psnr_mean_finite"] = mean / static_cast<double>(r.box.n);
  }
  j["box"] = {{"q1", r.box.q1},
              {"median", r.box.median},
              {"q3", r.box.q3},
              {"whisker_low", r.box.whisker_low},
              {"whisker_high", r.box.whisker_high},
              {"n", r.box.n},
              {"excluded_infinite", r.box.excluded}};
  j["grid_paths"] = r.grid_paths;
  j["config_digest"] = r.config_digest;
  return j;
}

void write_psnr_values(const std::filesystem::path& path, std::span<const double> values) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << std::setprecision(17);
  for (double v : values) {
    if (std::isinf(v)) {
      out << "inf\n";
    } else {
      out << v << '\n';
    }
  }
  if (!out) throw FileError("write failed for " + path.string());
}

std::vector<double> read_psnr_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read " + path.string());
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "inf") {
      out.push_back(kPsnrInfinity);
      continue;
    }
    try {
      out.push_back(std::stod(line));
    } catch (const std::exception&) {
      throw FileError(path.string() + ": bad PSNR value '" + line + "'");
    }
  }
  return out;
}

void write_report(const std::filesystem::path& dir, const EvalReport& r) {
  ensure_directory(dir);
  write_psnr_values(dir / "psnr.txt", r.psnr_values);
  const std::string s = report_json(r, "psnr.txt").dump(2) + "\n";
  write_bytes(dir / "report.json",
              std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

EvalReport evaluate_attack(const InverseNet<float>& g, const TransformNet<float>& h,
                           const ImageSet& test, double peak) {
  if (test.size() == 0) throw DomainError("evaluate_attack: empty test set");
  EvalReport r;
  r.peak = peak;
  r.psnr_values.reserve(test.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t first = 0; first < test.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, test.size() - first);
    const ImageBatch x = test.batch(first, count);
    const auto v = psnr_per_image(estimate(g, forward_transform(h, x)), x, peak);
    r.psnr_values.insert(r.psnr_values.end(), v.begin(), v.end());
  }
  const bool any_finite = std::any_of(r.psnr_values.begin(), r.psnr_values.end(),
                                      [](double v) { return std::isfinite(v); });
  if (any_finite) {
    r.box = box_stats(r.psnr_values);
  } else {
    r.box.excluded = r.psnr_values.size();
  }
  return r;
}

// --------------------------------------------------------------- grids

void export_grid(std::span<const GridRow> rows, const std::filesystem::path& path) {
  if (rows.empty()) throw DomainError("export_grid: no rows");
  std::optional<Shape> shape;
  std::size_t cols = 0;
  for (const auto& row : rows) {
    cols = std::max(cols, row.images.size());
    for (const auto& img : row.images) {
      if (img.shape.n != 1) throw DomainError("export_grid: images must be [1, C, H, W]");
      if (!shape) shape = img.shape;
      if (!(img.shape == *shape)) {
        throw DomainError("export_grid: image shape " + img.shape.str() + " differs from " +
                          shape->str());
      }
    }
  }
  if (!shape) throw DomainError("export_grid: no images");
  const Shape s = *shape;
  Tensor<float> canvas(Shape{1, s.c, rows.size() * s.h, cols * s.w});
  nlohmann::json layout = {{"tile", {s.c, s.h, s.w}}, {"rows", nlohmann::json::array()}};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    layout["rows"].push_back({{"label", rows[r].label}, {"count", rows[r].images.size()}});
    for (std::size_t i = 0; i < rows[r].images.size(); ++i) {
      const auto& img = rows[r].images[i];
      for (std::size_t c = 0; c < s.c; ++c) {
        for (std::size_t y = 0; y < s.h; ++y) {
          for (std::size_t x = 0; x < s.w; ++x) {
            canvas.at(0, c, r * s.h + y, i * s.w + x) = img.at(0, c, y, x);
          }
        }
      }
    }
  }
  try {
    write_png(path, canvas, 16, {{"protnet-grid", layout.dump()}});
  } catch (const DomainError& e) {
    throw FileError(path.string() + ": " + e.what());
  }
}

Grid read_grid(const std::filesystem::path& path) {
  PngText text;
  const Tensor<float> canvas = read_png(path, &text);
  const auto it = text.find("protnet-grid");
  if (it == text.end()) throw FileError(path.string() + ": no grid layout metadata");
  Grid grid;
  try {
    const auto layout = nlohmann::json::parse(it->second);
    const auto tile = layout.at("tile").get<std::vector<std::size_t>>();
    if (tile.size() != 3) throw FileError(path.string() + ": bad tile descriptor");
    const std::size_t c = tile[0], h = tile[1], w = tile[2];
    for (const auto& row : layout.at("rows")) {
      GridRow gr;
      gr.label = row.at("label").get<std::string>();
      const std::size_t r = grid.rows.size();
      for (std::size_t i = 0; i < row.at("count").get<std::size_t>(); ++i) {
        Tensor<float> img(Shape{1, c, h, w});
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              img.at(0, ch, y, x) = canvas.at(0, ch, r * h + y, i * w + x);
            }
          }
        }
        gr.images.push_back(std::move(img));
      }
      grid.rows.push_back(std::move(gr));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FileError(path.string() + ": bad grid layout (" + e.what() + ")");
  }
  return grid;
}

}  // namespace protnet
