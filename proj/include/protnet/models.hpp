#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/layers.hpp"

namespace protnet {

// ------------------------------------------------------------ descriptors

/// Encoder-decoder topology for the transformation and inverse networks.
/// `kind` is "unet" or "identity" (parameter-free pass-through).
struct TransformNetConfig {
  std::string kind = "unet";
  std::size_t channels = 3;
  std::size_t depth = 4;        // number of 2x down-samplings
  std::size_t base_width = 64;  // channels at full resolution, doubled per level
  bool batch_norm = true;

  void validate() const;
  friend bool operator==(const TransformNetConfig&, const TransformNetConfig&) = default;
};

/// CIFAR-style residual network (ResNet-20 by default: 3 stages x 3 blocks).
struct ClassifierConfig {
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::vector<std::size_t> stage_widths{16, 32, 64};
  std::size_t blocks_per_stage = 3;

  void validate() const;
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

/// Where the feature-reconstruction map comes from. Layer 0 is always the
/// raw input; see FeatureExtractor for the indexing of deeper layers.
struct FeatureConfig {
  std::string source = "classifier";  // identity | classifier | transform
  std::size_t layer = 2;
  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

void to_json(nlohmann::json& j, const TransformNetConfig& c);
void from_json(const nlohmann::json& j, TransformNetConfig& c);
void to_json(nlohmann::json& j, const ClassifierConfig& c);
void from_json(const nlohmann::json& j, ClassifierConfig& c);
void to_json(nlohmann::json& j, const FeatureConfig& c);
void from_json(const nlohmann::json& j, FeatureConfig& c);

// ----------------------------------------------------------- conv block

/// conv3x3 -> [BN] -> ReLU -> conv3x3 -> [BN] -> ReLU
template <typename T>
class ConvBlock {
 public:
  struct Tape {
    Tensor<T> x, r1, out;
    typename BatchNorm2d<T>::Cache bn1, bn2;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, std::size_t in, std::size_t out, bool bn, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape& tape) const;
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dy, bool accumulate);
  void commit(const Tape& tape);
  void collect(ParamList<T>& params, StateList<T>& state);

 private:
  bool bn_ = true;
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
};

// ------------------------------------------------------------------ U-Net

template <typename T>
class UNet {
 public:
  struct Tape {
    std::size_t levels_run = 0;  // encoder blocks evaluated
    bool full = false;
    bool bottleneck_run = false;
    std::vector<typename ConvBlock<T>::Tape> enc, dec;
    std::vector<std::vector<std::size_t>> pool_argmax;
    std::vector<Shape> pool_in;
    typename ConvBlock<T>::Tape bottleneck;
    std::vector<Tensor<T>> up_in;
    Tensor<T> head_in, out;
  };

  UNet() = default;
  UNet(const TransformNetConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape& tape) const;
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dy, bool accumulate);
  void commit(const Tape& tape);

  /// Feature layer k: 0 = input, 1..depth = encoder block outputs,
  /// depth+1 = bottleneck output.
  std::size_t feature_layers() const noexcept { return cfg_.depth + 1; }
  Tensor<T> forward_features(const Tensor<T>& x, std::size_t k, Mode mode, Tape& tape) const;
  Tensor<T> backward_features(const Tape& tape, const Tensor<T>& dfeat);

  void collect(ParamList<T>& params, StateList<T>& state);
  const TransformNetConfig& config() const noexcept { return cfg_; }

 private:
  void check_input(const Shape& s) const;
  TransformNetConfig cfg_;
  std::vector<ConvBlock<T>> enc_, dec_;
  ConvBlock<T> bottleneck_;
  std::vector<ConvTranspose2x2<T>> up_;
  Conv2d<T> head_;
};

// ----------------------------------------------------------- ResNet-20

template <typename T>
class BasicBlock {
 public:
  struct Tape {
    Tensor<T> x, r1, out;
    typename BatchNorm2d<T>::Cache bn1, bn2;
  };

  BasicBlock() = default;
  BasicBlock(const std::string& name, std::size_t in, std::size_t out, std::size_t stride,
             Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape& tape) const;
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dy, bool accumulate);
  void commit(const Tape& tape);
  void collect(ParamList<T>& params, StateList<T>& state);

 private:
  std::size_t in_ = 0, out_ = 0, stride_ = 1;
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
};

template <typename T>
class Classifier {
 public:
  struct Tape {
    std::size_t layers_run = 0;
    Tensor<T> x, stem_out, pooled;
    typename BatchNorm2d<T>::Cache stem_bn;
    std::vector<typename BasicBlock<T>::Tape> blocks;
    Shape gap_in;
  };

  Classifier() = default;
  Classifier(const ClassifierConfig& cfg, Rng& rng);

  /// Returns logits [n, classes, 1, 1].
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape& tape) const;
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dlogits, bool accumulate);
  void commit(const Tape& tape);

  /// Feature layer k: 0 = input, 1 = stem output, 1+s = output of stage s.
  std::size_t feature_layers() const noexcept { return 1 + cfg_.stage_widths.size(); }
  Tensor<T> forward_features(const Tensor<T>& x, std::size_t k, Mode mode, Tape& tape) const;
  Tensor<T> backward_features(const Tape& tape, const Tensor<T>& dfeat);

  void collect(ParamList<T>& params, StateList<T>& state);
  const ClassifierConfig& config() const noexcept { return cfg_; }
  std::size_t classes() const noexcept { return cfg_.classes; }

 private:
  Tensor<T> run(const Tensor<T>& x, Mode mode, Tape& tape, std::size_t stop) const;
  Tensor<T> unwind(const Tape& tape, Tensor<T> d, bool accumulate);

  ClassifierConfig cfg_;
  Conv2d<T> stem_;
  BatchNorm2d<T> stem_bn_;
  std::vector<BasicBlock<T>> blocks_;
  std::vector<std::size_t> stage_end_;  // blocks_ index one past each stage
  Linear<T> fc_;
};

// ----------------------------------------------------- transform network

/// h_theta: maps [n,C,H,W] images in [0,1] to images of the same shape in
/// [0,1]. Either a U-Net with a logistic output or the identity map.
template <typename T>
class TransformNet {
 public:
  using Tape = typename UNet<T>::Tape;

  TransformNet() = default;
  TransformNet(const TransformNetConfig& cfg, std::uint64_t init_seed);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape& tape) const;
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dy, bool accumulate);
  void commit(const Tape& tape);

  bool is_identity() const noexcept { return !unet_.has_value(); }
  UNet<T>* unet() noexcept { return unet_ ? &*unet_ : nullptr; }
  const TransformNetConfig& config() const noexcept { return cfg_; }
  std::uint64_t init_seed() const noexcept { return seed_; }

  ParamList<T> parameters();
  StateList<T> state();

 private:
  TransformNetConfig cfg_;
  std::uint64_t seed_ = 0;
  std::optional<UNet<T>> unet_;
};

/// The attacker's inverse network shares the encoder-decoder family.
template <typename T>
using InverseNet = TransformNet<T>;

// -------------------------------------------------------- feature map phi

/// phi_k: a read-only view of one layer of a built network. Extraction
/// always runs the source in eval mode and never produces parameter
/// gradients for it.
template <typename T>
class FeatureExtractor {
 public:
  struct Tape {
    typename Classifier<T>::Tape cls;
    typename UNet<T>::Tape unet;
  };

  static FeatureExtractor identity();
  static FeatureExtractor of_classifier(Classifier<T>& net, std::size_t k);
  static FeatureExtractor of_transform(TransformNet<T>& net, std::size_t k);

  Tensor<T> extract(const Tensor<T>& x) const;
  Tensor<T> extract(const Tensor<T>& x, Tape& tape) const;
  /// dL/dx given dL/dphi(x), for the tape recorded by `extract`.
  Tensor<T> backward(const Tape& tape, const Tensor<T>& dfeat) const;

  std::size_t layer() const noexcept { return k_; }
  bool is_identity() const noexcept { return cls_ == nullptr && unet_ == nullptr; }

 private:
  Classifier<T>* cls_ = nullptr;
  UNet<T>* unet_ = nullptr;
  std::size_t k_ = 0;
};

// -------------------------------------------------------------- builders

template <typename T = float>
TransformNet<T> build_transform_net(const TransformNetConfig& cfg, std::uint64_t init_seed) {
  return TransformNet<T>(cfg, init_seed);
}

template <typename T = float>
InverseNet<T> build_inverse_net(const TransformNetConfig& cfg, std::uint64_t init_seed) {
  return TransformNet<T>(cfg, init_seed);
}

template <typename T = float>
Classifier<T> build_classifier(const ClassifierConfig& cfg, std::uint64_t init_seed) {
  Rng rng(init_seed);
  return Classifier<T>(cfg, rng);
}

template <typename T>
ParamList<T> parameters_of(Classifier<T>& net) {
  ParamList<T> p;
  StateList<T> s;
  net.collect(p, s);
  return p;
}

template <typename T>
StateList<T> state_of(Classifier<T>& net) {
  ParamList<T> p;
  StateList<T> s;
  net.collect(p, s);
  return s;
}

/// Builds phi from its descriptor; `layer` must be valid for the source.
template <typename T>
FeatureExtractor<T> make_feature_extractor(const FeatureConfig& cfg, TransformNet<T>& h,
                                           Classifier<T>& psi) {
  if (cfg.source == "identity") {
    if (cfg.layer != 0) throw ConfigError("feature: identity source only has layer 0");
    return FeatureExtractor<T>::identity();
  }
  if (cfg.source == "classifier") return FeatureExtractor<T>::of_classifier(psi, cfg.layer);
  if (cfg.source == "transform") return FeatureExtractor<T>::of_transform(h, cfg.layer);
  throw ConfigError("feature.source: unknown value '" + cfg.source + "'");
}

// --------------------------------------------------- batch entry points

/// x_hat = h(x) in eval mode.
ImageBatch forward_transform(const TransformNet<float>& net, const ImageBatch& x);
/// Row-stochastic [m, c] probabilities (softmax of the logits, eval mode).
std::vector<std::vector<double>> classify(const Classifier<float>& net, const ImageBatch& x);
Tensor<float> extract_features(const FeatureExtractor<float>& phi, const ImageBatch& x);

/// Numerically stable softmax over each row of `logits` [n, c, 1, 1].
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

}  // namespace protnet
