#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protnet/models.hpp"

namespace protnet {

/// Human-readable provenance stored alongside the parameters.
struct CheckpointManifest {
  std::string architecture;  // e.g. "unet+resnet"
  int epoch = 0;
  double val_loss = 0.0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::string dataset;
  /// Descriptors of the stored networks keyed by prefix ("h", "psi", "g").
  nlohmann::json networks = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const CheckpointManifest& m);
void from_json(const nlohmann::json& j, CheckpointManifest& m);

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

/// Parameters and running statistics of one or more networks plus manifest.
struct Checkpoint {
  CheckpointManifest manifest;
  std::vector<NamedTensor> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

/// Archive layout: magic, format version, manifest JSON, tensor table, and a
/// trailing SHA-256 of everything before it.
inline constexpr char kCheckpointMagic[8] = {'P', 'R', 'O', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends the state of `net` under `prefix` and records its descriptor.
void add_network(Checkpoint& ckpt, const std::string& prefix, TransformNet<float>& net);
void add_network(Checkpoint& ckpt, const std::string& prefix, Classifier<float>& net);

/// Copies stored state into an already-built network of matching topology.
void restore_network(const Checkpoint& ckpt, const std::string& prefix, TransformNet<float>& net);
void restore_network(const Checkpoint& ckpt, const std::string& prefix, Classifier<float>& net);

/// Rebuilds networks from their stored descriptors.
TransformNet<float> load_transform_net(const Checkpoint& ckpt, const std::string& prefix = "h");
Classifier<float> load_classifier(const Checkpoint& ckpt, const std::string& prefix = "psi");
bool has_network(const Checkpoint& ckpt, const std::string& prefix);

/// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace protnet
