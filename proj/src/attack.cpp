#include "protnet/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json_util.hpp"
#include "protnet/image_io.hpp"

namespace protnet {

using detail::get_or;
using detail::reject_unknown;

namespace {

constexpr std::size_t kChunk = 64;

ImageBatch stack(std::span<const AttackPair> pairs, std::span<const std::size_t> idx,
                 bool protected_side) {
  const Shape s = pairs[idx[0]].plain.shape;
  ImageBatch out(Shape{idx.size(), s.c, s.h, s.w});
  const std::size_t k = s.sample_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& t = protected_side ? pairs[idx[i]].protected_ : pairs[idx[i]].plain;
    if (!(t.shape == s)) throw DomainError("attack pairs have inconsistent shapes");
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

}  // namespace

// ------------------------------------------------------------- config

void AttackConfig::validate() const {
  if (batch_size < 1) throw ConfigError("attack.batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("attack.base_lr must be > 0");
  if (!(lr_factor > 0.0)) throw ConfigError("attack.lr_factor must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("attack.momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("attack.weight_decay must be >= 0");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ConfigError("attack.lr_milestones must be strictly increasing");
    }
    if (epochs > 0 && lr_milestones[i] >= epochs) {
      throw ConfigError("attack.lr_milestones must be < epochs");
    }
  }
  if (pair_source != "train" && pair_source != "val" && pair_source != "test") {
    throw ConfigError("attack.pair_source: unknown split '" + pair_source + "'");
  }
  if (inverse_net) inverse_net->validate();
}

TransformNetConfig AttackConfig::resolve_inverse(const TransformNetConfig& h) const {
  if (inverse_net) return *inverse_net;
  if (h.kind != "identity") return h;
  TransformNetConfig g;
  g.channels = h.channels;
  g.depth = 3;
  g.base_width = 16;
  return g;
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"lr_factor", c.lr_factor},
       {"lr_milestones", c.lr_milestones},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"seed", c.seed},
       {"pair_source", c.pair_source},
       {"pair_count", c.pair_count},
       {"eval_count", c.eval_count}};
  if (c.inverse_net) j["inverse_net"] = *c.inverse_net;
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  reject_unknown(j,
                 {"inverse_net", "epochs", "batch_size", "base_lr", "lr_factor", "lr_milestones",
                  "momentum", "weight_decay", "seed", "pair_source", "pair_count", "eval_count"},
                 "attack");
  AttackConfig d;
  c.inverse_net.reset();
  if (j.contains("inverse_net")) c.inverse_net = j.at("inverse_net").get<TransformNetConfig>();
  c.epochs = get_or(j, "epochs", d.epochs, "attack");
  c.batch_size = get_or(j, "batch_size", d.batch_size, "attack");
  c.base_lr = get_or(j, "base_lr", d.base_lr, "attack");
  c.lr_factor = get_or(j, "lr_factor", d.lr_factor, "attack");
  c.lr_milestones = get_or(j, "lr_milestones", d.lr_milestones, "attack");
  c.momentum = get_or(j, "momentum", d.momentum, "attack");
  c.weight_decay = get_or(j, "weight_decay", d.weight_decay, "attack");
  c.seed = get_or(j, "seed", d.seed, "attack");
  c.pair_source = get_or(j, "pair_source", d.pair_source, "attack");
  c.pair_count = get_or(j, "pair_count", d.pair_count, "attack");
  c.eval_count = get_or(j, "eval_count", d.eval_count, "attack");
}

// -------------------------------------------------------------- pairs

std::vector<AttackPair> generate_pairs(const TransformNet<float>& h,
                                       std::span<const LabeledImage> images) {
  if (images.empty()) throw DomainError("generate_pairs: no images");
  std::vector<AttackPair> pairs;
  pairs.reserve(images.size());
  for (const auto& img : images) {
    pairs.push_back({img.pixels, forward_transform(h, img.pixels)});
  }
  return pairs;
}

std::vector<AttackPair> generate_pairs(const TransformNet<float>& h, const ImageSet& images) {
  if (images.size() == 0) throw DomainError("generate_pairs: no images");
  std::vector<AttackPair> pairs;
  pairs.reserve(images.size());
  const std::size_t k = images.image_size();
  const Shape one = images.batch_shape(1);
  for (std::size_t first = 0; first < images.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, images.size() - first);
    const ImageBatch x = images.batch(first, count);
    const ImageBatch y = forward_transform(h, x);
    for (std::size_t i = 0; i < count; ++i) {
      AttackPair p{Tensor<float>(one), Tensor<float>(one)};
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(i * k), k, p.plain.data.begin());
      std::copy_n(y.data.begin() + static_cast<std::ptrdiff_t>(i * k), k, p.protected_.data.begin());
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

bool verify_pairs(const TransformNet<float>& h, std::span<const AttackPair> pairs) {
  for (const auto& p : pairs) {
    const ImageBatch y = forward_transform(h, p.plain);
    if (!(y.shape == p.protected_.shape)) return false;
    if (std::memcmp(y.data.data(), p.protected_.data.data(), y.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

void write_pair_manifest(const std::filesystem::path& path, const PairManifest& m) {
  const nlohmann::json j = {
      {"h_digest", m.h_digest}, {"source", m.source}, {"count", m.count}, {"seed", m.seed}};
  const std::string s = j.dump(2) + "\n";
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

PairManifest read_pair_manifest(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    return {j.at("h_digest").get<std::string>(), j.at("source").get<std::string>(),
            j.at("count").get<std::size_t>(), j.at("seed").get<std::uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FileError(path.string() + ": unreadable pair manifest (" + e.what() + ")");
  }
}

std::string network_digest(TransformNet<float>& net) {
  Checkpoint ckpt;
  add_network(ckpt, "h", net);
  return sha256_hex(encode_checkpoint(ckpt));
}

// ---------------------------------------------------------- inversion

double inverse_mse(const InverseNet<float>& g, std::span<const AttackPair> pairs,
                   std::size_t batch) {
  if (pairs.empty()) throw DomainError("inverse_mse: no pairs");
  std::vector<std::size_t> idx;
  double sum = 0.0;
  std::size_t count_px = 0;
  for (std::size_t first = 0; first < pairs.size(); first += batch) {
    const std::size_t count = std::min(batch, pairs.size() - first);
    idx.resize(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    const ImageBatch x = stack(pairs, idx, true);
    const ImageBatch target = stack(pairs, idx, false);
    const ImageBatch y = forward_transform(g, x);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y.data[i]) - target.data[i];
      sum += d * d;
    }
    count_px += y.size();
  }
  return sum / static_cast<double>(count_px);
}

InverseTrainResult train_inverse(std::span<const AttackPair> pairs, InverseNet<float>& g,
                                 const AttackConfig& cfg,
                                 const std::function<void(std::size_t, double)>& on_epoch) {
  if (pairs.empty()) throw DomainError("train_inverse: no pairs");
  cfg.validate();
  InverseTrainResult result;
  result.initial_mse = inverse_mse(g, pairs, cfg.batch_size);
  if (cfg.epochs == 0 || g.is_identity()) {
    result.final_mse = result.initial_mse;
    return result;
  }
  const LrSchedule schedule = make_lr_schedule(cfg.base_lr, cfg.lr_milestones, cfg.lr_factor);
  SgdOptimizer<float> opt(g.parameters(), cfg.momentum, cfg.weight_decay);
  const std::size_t n = pairs.size();
  std::vector<std::size_t> idx;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = schedule(epoch);
    const auto order = permutation(n, derive_seed(cfg.seed, 0x1a7e, epoch));
    double sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t first = 0; first < n; first += cfg.batch_size, ++batch_no) {
      const std::size_t count = std::min(cfg.batch_size, n - first);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(first),
                 order.begin() + static_cast<std::ptrdiff_t>(first + count));
      const ImageBatch x = stack(pairs, idx, true);
      const ImageBatch target = stack(pairs, idx, false);

      opt.zero_grad();
      InverseNet<float>::Tape tape;
      const ImageBatch y = g.forward(x, Mode::Train, tape);
      Tensor<float> dy(y.shape);
      double mse = 0.0;
      const double scale = 2.0 / static_cast<double>(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double d = static_cast<double>(y.data[i]) - target.data[i];
        mse += d * d;
        dy.data[i] = static_cast<float>(scale * d);
      }
      mse /= static_cast<double>(y.size());
      if (!std::isfinite(mse)) {
        throw DivergenceError("inverse training diverged: non-finite loss at epoch " +
                              std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      g.backward(tape, dy, true);
      opt.step(lr);
      g.commit(tape);
      sum += mse * static_cast<double>(count);
    }
    result.epoch_mse.push_back(sum / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, result.epoch_mse.back());
  }
  result.final_mse = inverse_mse(g, pairs, cfg.batch_size);
  return result;
}

ImageBatch estimate(const InverseNet<float>& g, const ImageBatch& protected_images) {
  if (protected_images.shape.c != g.config().channels) {
    throw DomainError("estimate: expected " + std::to_string(g.config().channels) +
                      " channels, got " + protected_images.shape.str());
  }
  return forward_transform(g, protected_images);
}

}  // namespace protnet
