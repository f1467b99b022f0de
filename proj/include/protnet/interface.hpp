#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/attack.hpp"
#include "protnet/evaluation.hpp"
#include "protnet/training.hpp"

namespace protnet {

// --------------------------------------------------------- configuration

struct DataSettings {
  std::filesystem::path root = "data";
  std::uint64_t split_seed = 0;
  std::optional<SplitSizes> subset;  // random subset of each split
};

struct EvalSettings {
  double peak = 1.0;
  std::size_t grid_images = 10;  // images per grid row
  std::size_t test_count = 0;    // 0 = the whole test split
};

/// One experiment: everything a CLI verb needs. Precedence is
/// flags > file > defaults.
struct ExperimentConfig {
  DataSettings data;
  TransformNetConfig transform_net;
  ClassifierConfig classifier;
  FeatureConfig feature;
  TrainConfig train;
  AttackConfig attack;
  EvalSettings eval;
  std::filesystem::path output_dir = "runs/default";
  std::vector<double> alpha_sweep;  // empty: train.alpha only
  bool keep_all_checkpoints = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
};

void apply_overrides(ExperimentConfig& cfg, const Overrides& o);

/// SHA-256 of the canonical JSON form of the config.
std::string config_digest(const ExperimentConfig& cfg);

/// Loads the configured dataset and applies the subset, if any; checks the
/// classifier's class count against it.
DatasetSplit load_experiment_data(const ExperimentConfig& cfg);

// ------------------------------------------------------------- commands

struct TrainSummary {
  double alpha = 0.0;
  std::size_t best_epoch = 0;
  double best_val_total = 0.0;
  std::filesystem::path best_checkpoint, metrics_csv, run_manifest;
  std::vector<EpochRecord> records;
};

/// Trains one model per alpha (train.alpha, or each entry of alpha_sweep in
/// `<out>/alpha_<value>/`). `psi_init` seeds psi from a checkpoint and is
/// required when train.joint is false.
std::vector<TrainSummary> cmd_train(const ExperimentConfig& cfg, const DatasetSplit& data,
                                    const std::optional<std::filesystem::path>& psi_init = {},
                                    const EpochCallback& on_epoch = {});

/// Writes `<out>/<stem>.png` per input plus `<out>/grid.png`. Returns the
/// written paths (grid last).
std::vector<std::filesystem::path> cmd_protect(const std::filesystem::path& checkpoint,
                                               std::span<const std::filesystem::path> inputs,
                                               const std::filesystem::path& out_dir);

struct AttackSummary {
  InverseTrainResult training;
  EvalReport report;
  std::filesystem::path g_checkpoint, report_dir;
};

AttackSummary cmd_attack(const std::filesystem::path& h_checkpoint, const ExperimentConfig& cfg,
                         const DatasetSplit& data,
                         const std::function<void(std::size_t, double)>& on_epoch = {});

/// Accuracy of psi(h(x)) on the test split plus the protected-vs-plain PSNR
/// distribution and a plain/protected grid.
EvalReport cmd_eval(const std::filesystem::path& h_checkpoint,
                    const std::filesystem::path& psi_checkpoint, const ExperimentConfig& cfg,
                    const DatasetSplit& data);

// -------------------------------------------------------------- service

struct ClassifyResponse {
  std::vector<double> probabilities;
  int label = 0;
  std::string model_digest;
};

nlohmann::json to_json(const ClassifyResponse& r);
ClassifyResponse parse_classify_response(const std::string& body);

/// SHA-256 of the classifier-only archive of `psi`.
std::string classifier_digest(Classifier<float>& psi);

/// Classification of an already protected image (decoded raster).
ClassifyResponse classify_protected(const Classifier<float>& psi, const Tensor<float>& image,
                                    const std::string& digest);

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0: pick a free port
  std::size_t max_payload = 4 << 20;
  /// Sees the raw body of every classify request (tests use it to inspect
  /// what crosses the wire).
  std::function<void(const std::string&)> on_request;
};

/// POST /classify with a PNG body -> JSON ClassifyResponse.
/// 400 for undecodable payloads, 413 for oversized ones. GET /health -> ok.
class ClassifierService {
 public:
  ClassifierService(Classifier<float> psi, ServiceOptions opt = {});
  ~ClassifierService();
  ClassifierService(const ClassifierService&) = delete;
  ClassifierService& operator=(const ClassifierService&) = delete;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  const std::string& digest() const noexcept { return digest_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Classifier<float> psi_;
  std::string digest_;
  ServiceOptions opt_;
  std::thread thread_;
};

struct ClientOptions {
  int attempts = 3;
  int retry_delay_ms = 100;
  int timeout_s = 30;
};

/// Posts PNG bytes to http://host:port/classify.
ClassifyResponse submit_png(const std::string& address, const std::vector<std::uint8_t>& png,
                            const ClientOptions& opt = {});

/// The PNG a client sends for `image`: h(image) at 16 bits.
std::vector<std::uint8_t> protect_to_png(const TransformNet<float>& h, const Tensor<float>& image);

/// Protects each image locally and submits only the protected raster.
std::vector<ClassifyResponse> client_protect_and_submit(const TransformNet<float>& h,
                                                        std::span<const Tensor<float>> images,
                                                        const std::string& address,
                                                        const ClientOptions& opt = {});

/// Reference for the client/server path: psi applied to the decoded
/// protected raster, entirely in-process.
ClassifyResponse local_pipeline(const TransformNet<float>& h, const Classifier<float>& psi,
                                const Tensor<float>& image, const std::string& digest = "");

}  // namespace protnet
