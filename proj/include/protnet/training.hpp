#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/checkpoint.hpp"
#include "protnet/data.hpp"
#include "protnet/losses.hpp"

namespace protnet {

struct TrainConfig {
  double alpha = 0.005;
  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  double base_lr = 0.1;
  double lr_factor = 0.2;
  std::vector<std::size_t> lr_milestones{60, 120, 160};
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::uint64_t seed = 0;
  std::string dataset = "cifar10";
  /// false: psi is frozen (eval mode, no updates) and only h is trained.
  bool joint = true;
  AugmentationPolicy augment;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const AugmentationPolicy& a);
void from_json(const nlohmann::json& j, AugmentationPolicy& a);

/// Step decay: lr(e) = base * factor^#{m in milestones : m <= e}, e >= 1.
class LrSchedule {
 public:
  LrSchedule(double base, std::vector<std::size_t> milestones, double factor);
  double operator()(std::size_t epoch) const;
  double base() const noexcept { return base_; }

 private:
  double base_, factor_;
  std::vector<std::size_t> milestones_;
};

LrSchedule make_lr_schedule(double base, std::vector<std::size_t> milestones, double factor);

/// v <- momentum*v + (g + weight_decay*p); p <- p - lr*v.
template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
              double momentum, double weight_decay);

template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(ParamList<T> params, double momentum, double weight_decay);

  void zero_grad();
  void step(double lr);
  const ParamList<T>& params() const noexcept { return params_; }

 private:
  ParamList<T> params_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, weight_decay_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_total = 0.0, train_class = 0.0, train_feat = 0.0;
  double val_total = 0.0, val_class = 0.0, val_feat = 0.0;
  double val_accuracy = 0.0;  // percent
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& r);
void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochRecord> records);
std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path);

/// Where per-epoch checkpoints go: a directory (one archive per epoch) or
/// memory. With `keep_all` false, only the best-so-far archive is retained.
class CheckpointStore {
 public:
  static CheckpointStore in_memory(bool keep_all = true);
  static CheckpointStore in_directory(std::filesystem::path dir, bool keep_all = true);

  /// Stores the checkpoint for `epoch`; returns its handle index.
  std::size_t put(std::size_t epoch, Checkpoint ckpt, bool is_best);
  Checkpoint get(std::size_t handle) const;
  std::optional<std::filesystem::path> path(std::size_t handle) const;
  std::size_t size() const noexcept { return epochs_.size(); }

 private:
  std::optional<std::filesystem::path> dir_;
  bool keep_all_ = true;
  std::vector<std::size_t> epochs_;
  std::vector<std::optional<Checkpoint>> memory_;
  std::vector<bool> present_;
};

struct ObjectiveTotals {
  double total = 0.0, class_term = 0.0, feat_term = 0.0, accuracy = 0.0;
};

/// Objective means over a whole image set in eval mode, in chunks of `batch`.
ObjectiveTotals evaluate_set(const ImageSet& set, TransformNet<float>& h, Classifier<float>& psi,
                             const FeatureExtractor<float>& phi, double alpha, std::size_t batch);

struct TrainResult {
  std::vector<EpochRecord> records;
  std::vector<std::size_t> checkpoints;  // handles into the store, one per epoch
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Jointly optimizes h and psi (or h alone when !cfg.joint) on data.train.
/// Checkpoints hold networks "h" and "psi".
TrainResult train_joint(const TrainConfig& cfg, const DatasetSplit& data, TransformNet<float>& h,
                        Classifier<float>& psi, const FeatureExtractor<float>& phi,
                        CheckpointStore& store, const EpochCallback& on_epoch = {});

/// Index of the minimum val_total; ties go to the earliest epoch.
std::size_t best_record_index(std::span<const EpochRecord> records);

template <typename C>
const C& select_best_checkpoint(std::span<const EpochRecord> records, std::span<const C> checkpoints) {
  if (records.size() != checkpoints.size()) {
    throw DomainError("select_best_checkpoint: records and checkpoints differ in length");
  }
  return checkpoints[best_record_index(records)];
}

}  // namespace protnet
