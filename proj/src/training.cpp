#include "protnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json_util.hpp"
#include "protnet/image_io.hpp"

namespace protnet {

using detail::get_or;
using detail::reject_unknown;

// ------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("train.alpha must be >= 0");
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be > 0");
  if (!(lr_factor > 0.0)) throw ConfigError("train.lr_factor must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ConfigError("train.lr_milestones must be strictly increasing");
    }
    if (lr_milestones[i] >= epochs) throw ConfigError("train.lr_milestones must be < epochs");
  }
  parse_dataset_id(dataset);
  try {
    augment.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("train.augment: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const AugmentationPolicy& a) {
  j = {{"enabled", a.enabled},
       {"crop_padding", a.crop_padding},
       {"flip_probability", a.flip_probability}};
}

void from_json(const nlohmann::json& j, AugmentationPolicy& a) {
  reject_unknown(j, {"enabled", "crop_padding", "flip_probability"}, "augment");
  AugmentationPolicy d;
  a.enabled = get_or(j, "enabled", d.enabled, "augment");
  a.crop_padding = get_or(j, "crop_padding", d.crop_padding, "augment");
  a.flip_probability = get_or(j, "flip_probability", d.flip_probability, "augment");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"alpha", c.alpha},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"lr_factor", c.lr_factor},
       {"lr_milestones", c.lr_milestones},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"dataset", c.dataset},
       {"joint", c.joint},
       {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"alpha", "epochs", "batch_size", "base_lr", "lr_factor", "lr_milestones",
                  "momentum", "weight_decay", "seed", "dataset", "joint", "augment"},
                 "train");
  TrainConfig d;
  c.alpha = get_or(j, "alpha", d.alpha, "train");
  c.epochs = get_or(j, "epochs", d.epochs, "train");
  c.batch_size = get_or(j, "batch_size", d.batch_size, "train");
  c.base_lr = get_or(j, "base_lr", d.base_lr, "train");
  c.lr_factor = get_or(j, "lr_factor", d.lr_factor, "train");
  c.lr_milestones = get_or(j, "lr_milestones", d.lr_milestones, "train");
  c.momentum = get_or(j, "momentum", d.momentum, "train");
  c.weight_decay = get_or(j, "weight_decay", d.weight_decay, "train");
  c.seed = get_or(j, "seed", d.seed, "train");
  c.dataset = get_or(j, "dataset", d.dataset, "train");
  c.joint = get_or(j, "joint", d.joint, "train");
  c.augment = j.contains("augment") ? j.at("augment").get<AugmentationPolicy>() : d.augment;
}

// ----------------------------------------------------------- schedule

LrSchedule::LrSchedule(double base, std::vector<std::size_t> milestones, double factor)
    : base_(base), factor_(factor), milestones_(std::move(milestones)) {
  if (!(base > 0.0)) throw ConfigError("lr schedule: base must be > 0");
  if (!(factor > 0.0)) throw ConfigError("lr schedule: factor must be > 0");
  for (std::size_t i = 1; i < milestones_.size(); ++i) {
    if (milestones_[i] <= milestones_[i - 1]) {
      throw ConfigError("lr schedule: milestones must be strictly increasing");
    }
  }
}

double LrSchedule::operator()(std::size_t epoch) const {
  // Dividing by 1/factor keeps decimal schedules exact: 0.1 * 0.2 rounds to
  // 0.020000000000000004, 0.1 / 5 to 0.02.
  const double divisor = 1.0 / factor_;
  double lr = base_;
  for (std::size_t m : milestones_) {
    if (m <= epoch) lr /= divisor;
  }
  return lr;
}

LrSchedule make_lr_schedule(double base, std::vector<std::size_t> milestones, double factor) {
  return LrSchedule(base, std::move(milestones), factor);
}

// ---------------------------------------------------------------- SGD

template <typename T>
void sgd_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity, double lr,
              double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DomainError("sgd_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double v = momentum * velocity[i] + (grad[i] + weight_decay * param[i]);
    velocity[i] = static_cast<T>(v);
    param[i] = static_cast<T>(param[i] - lr * v);
  }
}

template <typename T>
SgdOptimizer<T>::SgdOptimizer(ParamList<T> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* p : params_) velocity_.emplace_back(p->value.size(), T(0));
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
  for (auto* p : params_) p->grad.zero();
}

template <typename T>
void SgdOptimizer<T>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto* p = params_[i];
    sgd_step<T>(std::span<T>(p->value.data), std::span<const T>(p->grad.data),
                std::span<T>(velocity_[i]), lr, momentum_, weight_decay_);
  }
}

template void sgd_step<float>(std::span<float>, std::span<const float>, std::span<float>, double,
                              double, double);
template void sgd_step<double>(std::span<double>, std::span<const double>, std::span<double>,
                               double, double, double);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

// ------------------------------------------------------------ metrics

std::string metrics_csv_header() {
  return "epoch,lr,train_total,train_class,train_feat,val_total,val_class,val_feat,val_accuracy";
}

std::string metrics_csv_row(const EpochRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.epoch << ',' << r.lr << ',' << r.train_total << ','
     << r.train_class << ',' << r.train_feat << ',' << r.val_total << ',' << r.val_class << ','
     << r.val_feat << ',' << r.val_accuracy;
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochRecord> records) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out << metrics_csv_header() << '\n';
  for (const auto& r : records) out << metrics_csv_row(r) << '\n';
  if (!out) throw FileError("write failed for " + path.string());
}

std::vector<EpochRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != metrics_csv_header()) {
    throw FileError(path.string() + ": not a metrics file");
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream is(line);
    EpochRecord r;
    is >> r.epoch >> r.lr >> r.train_total >> r.train_class >> r.train_feat >> r.val_total >>
        r.val_class >> r.val_feat >> r.val_accuracy;
    if (!is) throw FileError(path.string() + ": malformed row");
    out.push_back(r);
  }
  return out;
}

// -------------------------------------------------------- checkpoints

CheckpointStore CheckpointStore::in_memory(bool keep_all) {
  CheckpointStore s;
  s.keep_all_ = keep_all;
  return s;
}

CheckpointStore CheckpointStore::in_directory(std::filesystem::path dir, bool keep_all) {
  CheckpointStore s;
  ensure_directory(dir);
  s.dir_ = std::move(dir);
  s.keep_all_ = keep_all;
  return s;
}

std::optional<std::filesystem::path> CheckpointStore::path(std::size_t handle) const {
  if (!dir_) return std::nullopt;
  std::ostringstream name;
  name << "epoch_" << std::setw(4) << std::setfill('0') << epochs_.at(handle) << ".ckpt";
  return *dir_ / name.str();
}

std::size_t CheckpointStore::put(std::size_t epoch, Checkpoint ckpt, bool is_best) {
  const std::size_t handle = epochs_.size();
  epochs_.push_back(epoch);
  const bool keep = keep_all_ || is_best;
  if (keep && !keep_all_) {
    for (std::size_t i = 0; i < handle; ++i) {
      if (!present_[i]) continue;
      if (dir_) std::filesystem::remove(*path(i));
      memory_[i].reset();
      present_[i] = false;
    }
  }
  present_.push_back(keep);
  if (keep && dir_) {
    save_checkpoint(ckpt, *path(handle));
    memory_.emplace_back();
  } else if (keep) {
    memory_.emplace_back(std::move(ckpt));
  } else {
    memory_.emplace_back();
  }
  return handle;
}

Checkpoint CheckpointStore::get(std::size_t handle) const {
  if (handle >= epochs_.size()) throw DomainError("checkpoint store: no such handle");
  if (!present_[handle]) {
    throw DomainError("checkpoint store: epoch " + std::to_string(epochs_[handle]) +
                      " was not retained");
  }
  if (dir_) return load_checkpoint(*path(handle));
  return *memory_[handle];
}

// ------------------------------------------------------------ training

ObjectiveTotals evaluate_set(const ImageSet& set, TransformNet<float>& h, Classifier<float>& psi,
                             const FeatureExtractor<float>& phi, double alpha, std::size_t batch) {
  if (set.size() == 0) throw DomainError("evaluate_set: empty set");
  if (batch == 0) throw DomainError("evaluate_set: batch must be >= 1");
  ObjectiveTotals t;
  std::size_t correct = 0;
  ObjectiveOptions opt;  // eval mode, no gradients
  for (std::size_t first = 0; first < set.size(); first += batch) {
    const std::size_t count = std::min(batch, set.size() - first);
    const ImageBatch x = set.batch(first, count);
    const std::span<const int> labels(set.labels.data() + first, count);
    const ObjectiveResult r = evaluate_objective<float>(x, labels, h, psi, phi, alpha, opt);
    t.class_term += r.class_term * static_cast<double>(count);
    t.feat_term += r.feat_term * static_cast<double>(count);
    for (std::size_t i = 0; i < count; ++i) correct += r.predictions[i] == labels[i];
  }
  const double n = static_cast<double>(set.size());
  t.class_term /= n;
  t.feat_term /= n;
  t.total = t.class_term - alpha * t.feat_term;
  t.accuracy = 100.0 * static_cast<double>(correct) / n;
  return t;
}

namespace {

Checkpoint snapshot(const TrainConfig& cfg, std::size_t epoch, double val_total,
                    TransformNet<float>& h, Classifier<float>& psi) {
  Checkpoint ckpt;
  ckpt.manifest.architecture = (h.is_identity() ? "identity" : "unet") + std::string("+resnet");
  ckpt.manifest.epoch = static_cast<int>(epoch);
  ckpt.manifest.val_loss = val_total;
  ckpt.manifest.alpha = cfg.alpha;
  ckpt.manifest.seed = cfg.seed;
  ckpt.manifest.dataset = cfg.dataset;
  ckpt.manifest.extra["train"] = cfg;
  add_network(ckpt, "h", h);
  add_network(ckpt, "psi", psi);
  return ckpt;
}

}  // namespace

TrainResult train_joint(const TrainConfig& cfg, const DatasetSplit& data, TransformNet<float>& h,
                        Classifier<float>& psi, const FeatureExtractor<float>& phi,
                        CheckpointStore& store, const EpochCallback& on_epoch) {
  cfg.validate();
  if (static_cast<std::size_t>(data.classes) != psi.classes()) {
    throw ConfigError("classifier has " + std::to_string(psi.classes()) +
                      " classes but the dataset has " + std::to_string(data.classes));
  }
  if (data.train.size() == 0 || data.val.size() == 0) {
    throw DomainError("train_joint: train and validation splits must be non-empty");
  }
  const LrSchedule schedule = make_lr_schedule(cfg.base_lr, cfg.lr_milestones, cfg.lr_factor);

  ParamList<float> params = h.parameters();
  if (cfg.joint) {
    for (auto* p : parameters_of(psi)) params.push_back(p);
  }
  SgdOptimizer<float> opt(params, cfg.momentum, cfg.weight_decay);

  ObjectiveOptions oo;
  oo.h_mode = Mode::Train;
  oo.psi_mode = cfg.joint ? Mode::Train : Mode::Eval;
  oo.backprop = true;
  oo.psi_grads = cfg.joint;

  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  const std::size_t n = data.train.size();
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = schedule(epoch);
    const auto order = permutation(n, derive_seed(cfg.seed, 0x5a0ff1e, epoch));
    double sum_class = 0.0, sum_feat = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size, ++batch_no) {
      const std::size_t count = std::min(cfg.batch_size, n - first);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
                 order.begin() + static_cast<std::ptrdiff_t>(first + count));
      labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = data.train.labels[idx[i]];
      const ImageBatch x = cfg.augment.enabled
                               ? augmented_batch(data.train, idx, cfg.augment, cfg.seed, epoch)
                               : data.train.batch(idx);

      opt.zero_grad();
      ObjectiveTapes<float> tapes;
      const ObjectiveResult r =
          evaluate_objective<float>(x, labels, h, psi, phi, cfg.alpha, oo, &tapes);
      if (!std::isfinite(r.total)) {
        throw DivergenceError("training diverged: non-finite loss at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      opt.step(lr);
      h.commit(tapes.h);
      if (cfg.joint) psi.commit(tapes.psi);
      sum_class += r.class_term * static_cast<double>(count);
      sum_feat += r.feat_term * static_cast<double>(count);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_class = sum_class / static_cast<double>(n);
    rec.train_feat = sum_feat / static_cast<double>(n);
    rec.train_total = rec.train_class - cfg.alpha * rec.train_feat;
    const ObjectiveTotals v = evaluate_set(data.val, h, psi, phi, cfg.alpha, cfg.batch_size);
    if (!std::isfinite(v.total)) {
      throw DivergenceError("training diverged: non-finite validation loss at epoch " +
                            std::to_string(epoch));
    }
    rec.val_total = v.total;
    rec.val_class = v.class_term;
    rec.val_feat = v.feat_term;
    rec.val_accuracy = v.accuracy;

    const bool is_best = rec.val_total < best;
    if (is_best) best = rec.val_total;
    result.checkpoints.push_back(store.put(epoch, snapshot(cfg, epoch, rec.val_total, h, psi), is_best));
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

std::size_t best_record_index(std::span<const EpochRecord> records) {
  if (records.empty()) throw DomainError("select_best_checkpoint: no records");
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].val_total < records[best].val_total) best = i;
  }
  return best;
}

}  // namespace protnet
