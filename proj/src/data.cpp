#include "protnet/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>

namespace protnet {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
constexpr std::size_t kCifarTrainCount = 50000;
constexpr std::size_t kCifarTestCount = 10000;

double unit_uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::vector<std::uint8_t> read_gzip(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw FileError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      gzclose(f);
      throw FileError("corrupt gzip stream in " + path.string());
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

/// Extracts regular files of a ustar archive keyed by base name.
std::map<std::string, std::vector<std::uint8_t>> untar(const std::vector<std::uint8_t>& tar,
                                                      const fs::path& source) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  std::size_t pos = 0;
  while (pos + 512 <= tar.size()) {
    const std::uint8_t* h = tar.data() + pos;
    if (std::all_of(h, h + 512, [](std::uint8_t b) { return b == 0; })) break;
    std::string name(reinterpret_cast<const char*>(h), strnlen(reinterpret_cast<const char*>(h), 100));
    const std::string size_field(reinterpret_cast<const char*>(h + 124), 12);
    std::size_t size = 0;
    for (char ch : size_field) {
      if (ch >= '0' && ch <= '7') size = size * 8 + static_cast<std::size_t>(ch - '0');
    }
    const char type = static_cast<char>(h[156]);
    pos += 512;
    if (pos + size > tar.size()) throw FileError("truncated tar archive " + source.string());
    if (type == '0' || type == '\0') {
      files[fs::path(name).filename().string()] =
          std::vector<std::uint8_t>(tar.begin() + static_cast<std::ptrdiff_t>(pos),
                                    tar.begin() + static_cast<std::ptrdiff_t>(pos + size));
    }
    pos += (size + 511) / 512 * 512;
  }
  return files;
}

/// Appends fixed-size CIFAR records. `label_bytes` is 1 (CIFAR-10) or 2
/// (CIFAR-100 coarse+fine; the fine label is used).
void append_records(ImageSet& set, const std::vector<std::uint8_t>& bytes,
                    std::size_t label_bytes, std::size_t expected, int classes,
                    const std::string& file) {
  const std::size_t rec = label_bytes + kCifarImageBytes;
  if (bytes.size() != rec * expected) {
    throw FileError("corrupt CIFAR archive " + file + ": expected " +
                    std::to_string(rec * expected) + " bytes, found " +
                    std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < expected; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    const int label = r[label_bytes - 1];
    if (label >= classes) {
      throw FileError("corrupt CIFAR archive " + file + ": label " + std::to_string(label) +
                      " out of range at record " + std::to_string(i));
    }
    set.push_back({r + label_bytes, kCifarImageBytes}, label, set.size());
  }
}

struct ArchiveFiles {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> train, test;
};

ArchiveFiles locate(DatasetId id, const fs::path& root) {
  const bool c10 = id == DatasetId::Cifar10;
  const fs::path dir = root / (c10 ? "cifar-10-batches-bin" : "cifar-100-binary");
  const fs::path tgz = root / (c10 ? "cifar-10-binary.tar.gz" : "cifar-100-binary.tar.gz");
  std::vector<std::string> train_names, test_names;
  if (c10) {
    for (int b = 1; b <= 5; ++b) train_names.push_back("data_batch_" + std::to_string(b) + ".bin");
    test_names = {"test_batch.bin"};
  } else {
    train_names = {"train.bin"};
    test_names = {"test.bin"};
  }

  ArchiveFiles out;
  if (fs::is_directory(dir)) {
    for (const auto& n : train_names) {
      const fs::path p = dir / n;
      if (!fs::exists(p)) throw FileError("missing CIFAR file " + p.string());
      out.train.emplace_back(p.string(), read_file(p));
    }
    for (const auto& n : test_names) {
      const fs::path p = dir / n;
      if (!fs::exists(p)) throw FileError("missing CIFAR file " + p.string());
      out.test.emplace_back(p.string(), read_file(p));
    }
    return out;
  }
  if (fs::exists(tgz)) {
    auto files = untar(read_gzip(tgz), tgz);
    for (const auto& n : train_names) {
      auto it = files.find(n);
      if (it == files.end()) throw FileError("archive " + tgz.string() + " lacks " + n);
      out.train.emplace_back(tgz.string() + ":" + n, std::move(it->second));
    }
    for (const auto& n : test_names) {
      auto it = files.find(n);
      if (it == files.end()) throw FileError("archive " + tgz.string() + " lacks " + n);
      out.test.emplace_back(tgz.string() + ":" + n, std::move(it->second));
    }
    return out;
  }
  throw FileError("dataset " + to_string(id) + " not found: expected " + dir.string() + " or " +
                  tgz.string());
}

ImageSet pick(const ImageSet& src, std::span<const std::size_t> idx) {
  ImageSet out;
  out.channels = src.channels;
  out.height = src.height;
  out.width = src.width;
  out.pixels.reserve(idx.size() * src.image_size());
  for (std::size_t i : idx) {
    out.push_back({src.pixels.data() + i * src.image_size(), src.image_size()}, src.labels[i],
                  src.source_index[i]);
  }
  return out;
}

}  // namespace

OneHotLabel one_hot(int label, int classes) {
  if (classes < 1) throw DomainError("one_hot: class count must be positive");
  if (label < 0 || label >= classes) {
    throw DomainError("one_hot: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(classes) + ")");
  }
  OneHotLabel y;
  y.entries.assign(static_cast<std::size_t>(classes), 0.0);
  y.entries[static_cast<std::size_t>(label)] = 1.0;
  return y;
}

LabeledImage ImageSet::get(std::size_t i) const {
  if (i >= size()) throw DomainError("image index out of range");
  LabeledImage img;
  img.pixels = Tensor<float>(Shape{1, channels, height, width});
  const std::uint8_t* src = pixels.data() + i * image_size();
  for (std::size_t k = 0; k < image_size(); ++k) img.pixels.data[k] = src[k] / 255.0f;
  img.label = labels[i];
  return img;
}

ImageBatch ImageSet::batch(std::span<const std::size_t> indices) const {
  ImageBatch b(batch_shape(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= size()) throw DomainError("image index out of range");
    const std::uint8_t* src = pixels.data() + indices[j] * image_size();
    float* dst = b.ptr() + j * image_size();
    for (std::size_t k = 0; k < image_size(); ++k) dst[k] = src[k] / 255.0f;
  }
  return b;
}

ImageBatch ImageSet::batch(std::size_t first, std::size_t count) const {
  std::vector<std::size_t> idx(count);
  for (std::size_t j = 0; j < count; ++j) idx[j] = first + j;
  return batch(idx);
}

std::vector<LabeledImage> ImageSet::to_list() const {
  std::vector<LabeledImage> out;
  out.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) out.push_back(get(i));
  return out;
}

void ImageSet::push_back(std::span<const std::uint8_t> image, int label, std::size_t source) {
  if (image.size() != image_size()) throw DomainError("image byte count mismatch");
  pixels.insert(pixels.end(), image.begin(), image.end());
  labels.push_back(label);
  source_index.push_back(source);
}

void AugmentationPolicy::validate() const {
  if (flip_probability < 0.0 || flip_probability > 1.0) {
    throw ConfigError("augment.flip_probability must lie in [0, 1]");
  }
}

DatasetId parse_dataset_id(const std::string& name) {
  if (name == "cifar10") return DatasetId::Cifar10;
  if (name == "cifar100") return DatasetId::Cifar100;
  throw ConfigError("unknown dataset id '" + name + "' (expected cifar10 or cifar100)");
}

std::string to_string(DatasetId id) { return id == DatasetId::Cifar10 ? "cifar10" : "cifar100"; }

SplitSizes default_split_sizes(DatasetId id) {
  return id == DatasetId::Cifar10 ? SplitSizes{45000, 5000, 10000}
                                  : SplitSizes{47500, 2500, 10000};
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(mix_seed(seed));
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

DatasetSplit make_split(DatasetId id, ImageSet full_train, ImageSet test,
                        std::uint64_t split_seed) {
  const SplitSizes sizes = default_split_sizes(id);
  if (full_train.size() != sizes.train + sizes.val || test.size() != sizes.test) {
    throw DomainError("make_split: archive sizes do not match the " + to_string(id) + " profile");
  }
  auto perm = permutation(full_train.size(), derive_seed(split_seed, 0x5e1u));
  std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sizes.val));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(sizes.val), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  DatasetSplit split;
  split.name = to_string(id);
  split.classes = id == DatasetId::Cifar10 ? 10 : 100;
  split.train = pick(full_train, train);
  split.val = pick(full_train, val);
  split.test = std::move(test);
  return split;
}

DatasetSplit load_dataset(const std::string& name, const fs::path& root,
                          std::uint64_t split_seed) {
  const DatasetId id = parse_dataset_id(name);
  const ArchiveFiles files = locate(id, root);
  const int classes = id == DatasetId::Cifar10 ? 10 : 100;
  const std::size_t label_bytes = id == DatasetId::Cifar10 ? 1 : 2;
  ImageSet train, test;
  for (const auto& [file, bytes] : files.train) {
    append_records(train, bytes, label_bytes, kCifarTrainCount / files.train.size(), classes, file);
  }
  for (const auto& [file, bytes] : files.test) {
    append_records(test, bytes, label_bytes, kCifarTestCount, classes, file);
  }
  return make_split(id, std::move(train), std::move(test), split_seed);
}

ImageSet random_subset(const ImageSet& set, std::size_t n, std::uint64_t seed) {
  if (n > set.size()) {
    throw ConfigError("subset size " + std::to_string(n) + " exceeds split size " +
                      std::to_string(set.size()));
  }
  auto perm = permutation(set.size(), seed);
  std::vector<std::size_t> idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(idx.begin(), idx.end());
  return pick(set, idx);
}

DatasetSplit subsample(const DatasetSplit& split, SplitSizes sizes, std::uint64_t seed) {
  DatasetSplit out;
  out.name = split.name;
  out.classes = split.classes;
  out.train = random_subset(split.train, sizes.train, derive_seed(seed, 1));
  out.val = random_subset(split.val, sizes.val, derive_seed(seed, 2));
  out.test = random_subset(split.test, sizes.test, derive_seed(seed, 3));
  return out;
}

LabeledImage crop_and_flip(const LabeledImage& image, std::size_t pad, std::size_t offset_y,
                           std::size_t offset_x, bool flip) {
  const Shape s = image.pixels.shape;
  if (offset_y > 2 * pad || offset_x > 2 * pad) throw DomainError("crop offset outside padding");
  LabeledImage out{Tensor<float>(s), image.label};
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t y = 0; y < s.h; ++y) {
      // Row in the padded image is y + offset_y; source row is that minus pad.
      const auto sy = static_cast<std::ptrdiff_t>(y + offset_y) - static_cast<std::ptrdiff_t>(pad);
      for (std::size_t x = 0; x < s.w; ++x) {
        const std::size_t dx = flip ? s.w - 1 - x : x;
        const auto sx =
            static_cast<std::ptrdiff_t>(x + offset_x) - static_cast<std::ptrdiff_t>(pad);
        float v = 0.0f;
        if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(s.h) && sx >= 0 &&
            sx < static_cast<std::ptrdiff_t>(s.w)) {
          v = image.pixels.at(0, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
        out.pixels.at(0, c, y, dx) = v;
      }
    }
  }
  return out;
}

LabeledImage augment(const LabeledImage& image, const AugmentationPolicy& policy, Rng& rng) {
  if (!policy.enabled) return image;
  const std::size_t span = 2 * policy.crop_padding + 1;
  const auto oy = static_cast<std::size_t>(rng() % span);
  const auto ox = static_cast<std::size_t>(rng() % span);
  const bool flip = unit_uniform(rng) < policy.flip_probability;
  return crop_and_flip(image, policy.crop_padding, oy, ox, flip);
}

ImageBatch augmented_batch(const ImageSet& set, std::span<const std::size_t> indices,
                           const AugmentationPolicy& policy, std::uint64_t seed,
                           std::uint64_t epoch) {
  if (!policy.enabled) return set.batch(indices);
  ImageBatch b(set.batch_shape(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    Rng rng(derive_seed(seed, epoch, indices[j]));
    const LabeledImage img = augment(set.get(indices[j]), policy, rng);
    std::copy(img.pixels.data.begin(), img.pixels.data.end(), b.ptr() + j * set.image_size());
  }
  return b;
}

}  // namespace protnet
