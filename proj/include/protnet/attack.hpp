#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/data.hpp"
#include "protnet/training.hpp"

namespace protnet {

/// A (plain, protected) pair with protected = h(plain) in eval mode.
struct AttackPair {
  Tensor<float> plain;      // [1, C, H, W]
  Tensor<float> protected_; // [1, C, H, W]
};

struct AttackConfig {
  /// Inverse network topology. Unset: same as h, or a depth-3/width-16
  /// U-Net when h is the identity.
  std::optional<TransformNetConfig> inverse_net;
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  /// Larger than the classifier recipe's 0.1: the per-pixel MSE gradient is
  /// orders of magnitude smaller than a cross-entropy gradient.
  double base_lr = 5.0;
  double lr_factor = 0.2;
  std::vector<std::size_t> lr_milestones{15, 30, 40};
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::uint64_t seed = 0;
  std::string pair_source = "train";  // split the pairs are built from
  std::size_t pair_count = 0;         // 0 = the whole split
  std::size_t eval_count = 0;         // held-out test images, 0 = all

  void validate() const;
  TransformNetConfig resolve_inverse(const TransformNetConfig& h) const;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

std::vector<AttackPair> generate_pairs(const TransformNet<float>& h,
                                       std::span<const LabeledImage> images);
std::vector<AttackPair> generate_pairs(const TransformNet<float>& h, const ImageSet& images);

/// True when recomputing h(plain) reproduces every stored protected image
/// bit for bit.
bool verify_pairs(const TransformNet<float>& h, std::span<const AttackPair> pairs);

/// Records which h produced a pair set.
struct PairManifest {
  std::string h_digest;  // SHA-256 of the h checkpoint archive
  std::string source;
  std::size_t count = 0;
  std::uint64_t seed = 0;
};

void write_pair_manifest(const std::filesystem::path& path, const PairManifest& m);
PairManifest read_pair_manifest(const std::filesystem::path& path);

/// SHA-256 of the encoded archive of `net` alone, as stored under "h".
std::string network_digest(TransformNet<float>& net);

struct InverseTrainResult {
  double initial_mse = 0.0;        // eval mode, all pairs, before training
  double final_mse = 0.0;          // eval mode, all pairs, after training
  std::vector<double> epoch_mse;   // running minibatch mean per epoch
};

/// Mean squared pixel error of g(protected) against plain, eval mode.
double inverse_mse(const InverseNet<float>& g, std::span<const AttackPair> pairs,
                   std::size_t batch = 128);

/// Trains g in place to map protected images back to plain ones.
InverseTrainResult train_inverse(std::span<const AttackPair> pairs, InverseNet<float>& g,
                                 const AttackConfig& cfg,
                                 const std::function<void(std::size_t, double)>& on_epoch = {});

/// g(protected) in eval mode; output shape equals input shape.
ImageBatch estimate(const InverseNet<float>& g, const ImageBatch& protected_images);

}  // namespace protnet
