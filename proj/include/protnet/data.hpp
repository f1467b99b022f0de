#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protnet/rng.hpp"
#include "protnet/tensor.hpp"

namespace protnet {

/// One image with its class index. `pixels` has shape [1, C, H, W] with
/// values in [0, 1].
struct LabeledImage {
  Tensor<float> pixels;
  int label = 0;
};

/// Length-c indicator vector of a class.
struct OneHotLabel {
  std::vector<double> entries;
  std::size_t size() const noexcept { return entries.size(); }
};

OneHotLabel one_hot(int label, int classes);

/// A set of 8-bit images stored contiguously (CHW per image). Pixel values
/// are exposed as v / 255.
struct ImageSet {
  std::size_t channels = 3, height = 32, width = 32;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  /// Position of each image in its source archive ordering (training
  /// archive indices for train/val, test archive indices for test).
  std::vector<std::size_t> source_index;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return channels * height * width; }
  Shape batch_shape(std::size_t n) const { return {n, channels, height, width}; }

  LabeledImage get(std::size_t i) const;
  /// Stacks the given images into a [n, C, H, W] batch without augmentation.
  ImageBatch batch(std::span<const std::size_t> indices) const;
  ImageBatch batch(std::size_t first, std::size_t count) const;
  std::vector<LabeledImage> to_list() const;
  void push_back(std::span<const std::uint8_t> image, int label, std::size_t source);
};

struct DatasetSplit {
  ImageSet train, val, test;
  int classes = 0;
  std::string name;
};

struct AugmentationPolicy {
  bool enabled = true;
  std::size_t crop_padding = 4;
  double flip_probability = 0.5;

  void validate() const;
};

enum class DatasetId { Cifar10, Cifar100 };

DatasetId parse_dataset_id(const std::string& name);
std::string to_string(DatasetId id);

struct SplitSizes {
  std::size_t train, val, test;
};
SplitSizes default_split_sizes(DatasetId id);

/// Reads the CIFAR binary archives under `root`, accepting either the
/// extracted directory (cifar-10-batches-bin/, cifar-100-binary/) or the
/// original .tar.gz. The validation split is a uniformly random subset of the
/// 50,000 training images chosen by `split_seed`.
DatasetSplit load_dataset(const std::string& name, const std::filesystem::path& root,
                          std::uint64_t split_seed);

/// Splits a full 50k/10k archive pair into train/val/test per the profile.
DatasetSplit make_split(DatasetId id, ImageSet full_train, ImageSet test,
                        std::uint64_t split_seed);

/// `n` images of `set` chosen uniformly at random, kept in source order.
ImageSet random_subset(const ImageSet& set, std::size_t n, std::uint64_t seed);

/// Random subset of each split (deterministic in `seed`); sizes larger than
/// a split are an error.
DatasetSplit subsample(const DatasetSplit& split, SplitSizes sizes, std::uint64_t seed);

/// Deterministic Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

/// Zero-pads by `pad`, takes the HxW window at (offset_y, offset_x) of the
/// padded image, then optionally mirrors horizontally.
LabeledImage crop_and_flip(const LabeledImage& image, std::size_t pad, std::size_t offset_y,
                           std::size_t offset_x, bool flip);

LabeledImage augment(const LabeledImage& image, const AugmentationPolicy& policy, Rng& rng);

/// Builds a training batch; sample i draws its augmentation from a stream
/// seeded by (seed, epoch, indices[i]) so batches are order-independent.
ImageBatch augmented_batch(const ImageSet& set, std::span<const std::size_t> indices,
                           const AugmentationPolicy& policy, std::uint64_t seed,
                           std::uint64_t epoch);

}  // namespace protnet
