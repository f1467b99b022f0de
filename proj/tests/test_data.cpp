#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fake_cifar.hpp"
#include "properties.hpp"
#include "scratch.hpp"
#include "synthetic.hpp"

using namespace protnet;
namespace fs = std::filesystem;

namespace {

using testing::cifar_records;
using testing::make_cifar10_dir;

void tar_entry(gzFile f, const std::string& name, const std::vector<std::uint8_t>& data) {
  char h[512] = {};
  std::snprintf(h, 100, "%s", name.c_str());
  std::snprintf(h + 100, 8, "%07o", 0644);
  std::snprintf(h + 108, 8, "%07o", 0);
  std::snprintf(h + 116, 8, "%07o", 0);
  std::snprintf(h + 124, 12, "%011zo", data.size());
  std::snprintf(h + 136, 12, "%011o", 0);
  h[156] = '0';
  std::memcpy(h + 257, "ustar", 5);
  std::memset(h + 148, ' ', 8);
  unsigned sum = 0;
  for (unsigned char c : h) sum += c;
  std::snprintf(h + 148, 8, "%06o", sum);
  gzwrite(f, h, 512);
  gzwrite(f, data.data(), static_cast<unsigned>(data.size()));
  const std::vector<char> pad((512 - data.size() % 512) % 512, 0);
  if (!pad.empty()) gzwrite(f, pad.data(), static_cast<unsigned>(pad.size()));
}

void make_cifar100_tgz(const fs::path& root) {
  fs::create_directories(root);
  gzFile f = gzopen((root / "cifar-100-binary.tar.gz").string().c_str(), "wb1");
  tar_entry(f, "cifar-100-binary/train.bin", cifar_records(50000, 2, 100, 0));
  tar_entry(f, "cifar-100-binary/test.bin", cifar_records(10000, 2, 100, 50000));
  const std::vector<char> end(1024, 0);
  gzwrite(f, end.data(), 1024);
  gzclose(f);
}

std::size_t record_id(const ImageSet& s, std::size_t i) {
  const std::uint8_t* p = s.pixels.data() + i * s.image_size();
  return p[0] | (static_cast<std::size_t>(p[1]) << 8);
}

}  // namespace

TEST_CASE("one_hot examples and errors") {
  const auto y = one_hot(3, 10);
  CHECK(y.size() == 10);
  CHECK(y.entries[3] == 1.0);
  CHECK(one_hot(0, 1).entries == std::vector<double>{1.0});
  CHECK_THROWS_AS(one_hot(10, 10), DomainError);
  CHECK_THROWS_AS(one_hot(-1, 10), DomainError);
  CHECK_THROWS_AS(one_hot(0, 0), DomainError);
}

TEST_CASE("property: one-hot") { CHECK(testing::prop_one_hot().ok); }

TEST_CASE("property: augmentation contract") {
  const auto p = testing::prop_augment_contract(3);
  INFO(p.detail);
  CHECK(p.ok);
}

TEST_CASE("crop_and_flip matches a direct index oracle") {
  Rng rng(4);
  LabeledImage img{testing::random_images(Shape{1, 2, 5, 7}, rng), 4};
  for (std::size_t oy = 0; oy <= 4; ++oy) {
    for (std::size_t ox = 0; ox <= 4; ++ox) {
      for (bool flip : {false, true}) {
        const auto out = crop_and_flip(img, 2, oy, ox, flip);
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t y = 0; y < 5; ++y) {
            for (std::size_t x = 0; x < 7; ++x) {
              const std::size_t xs = flip ? 6 - x : x;  // column before mirroring
              const long sy = static_cast<long>(y + oy) - 2, sx = static_cast<long>(xs + ox) - 2;
              const float expect = (sy < 0 || sy >= 5 || sx < 0 || sx >= 7)
                                       ? 0.0f
                                       : img.pixels.at(0, c, static_cast<std::size_t>(sy),
                                                       static_cast<std::size_t>(sx));
              REQUIRE(out.pixels.at(0, c, y, x) == expect);
            }
          }
        }
      }
    }
  }
  // Centre crop without flip is the identity.
  CHECK(crop_and_flip(img, 2, 2, 2, false).pixels.data == img.pixels.data);
  CHECK_THROWS_AS(crop_and_flip(img, 2, 5, 0, false), DomainError);
}

TEST_CASE("augmented batches are deterministic and order independent") {
  const ImageSet set = testing::synthetic_images(12, 3, 1, 8);
  AugmentationPolicy pol;
  const std::vector<std::size_t> idx{0, 5, 7, 11}, rev{11, 7, 5, 0};
  const ImageBatch a = augmented_batch(set, idx, pol, 9, 2);
  const ImageBatch b = augmented_batch(set, idx, pol, 9, 2);
  CHECK(a.data == b.data);
  const ImageBatch r = augmented_batch(set, rev, pol, 9, 2);
  for (std::size_t j = 0; j < 4; ++j) {
    const auto x = a.sample(j), y = r.sample(3 - j);
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
  CHECK(augmented_batch(set, idx, pol, 9, 3).data != a.data);
  pol.enabled = false;
  CHECK(augmented_batch(set, idx, pol, 9, 2).data == set.batch(idx).data);
}

TEST_CASE("augmentation policy validation") {
  AugmentationPolicy p;
  p.flip_probability = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("permutation is a deterministic permutation") {
  for (std::size_t n : {0u, 1u, 2u, 17u, 1000u}) {
    auto p = permutation(n, 5);
    CHECK(p == permutation(n, 5));
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] == i);
  }
  CHECK(permutation(100, 1) != permutation(100, 2));
}

TEST_CASE("property: split determinism and disjointness") {
  const auto p = testing::prop_split(0);
  INFO(p.detail);
  CHECK(p.ok);
}

TEST_CASE("split sizes follow the dataset profile") {
  CHECK(default_split_sizes(DatasetId::Cifar10).train == 45000);
  CHECK(default_split_sizes(DatasetId::Cifar10).val == 5000);
  CHECK(default_split_sizes(DatasetId::Cifar100).train == 47500);
  CHECK(default_split_sizes(DatasetId::Cifar100).val == 2500);
  ImageSet train, test;
  testing::tiny_archives(train, test);
  test.labels.pop_back();
  test.source_index.pop_back();
  test.pixels.pop_back();
  CHECK_THROWS_AS(make_split(DatasetId::Cifar10, train, test, 0), DomainError);
}

TEST_CASE("unknown dataset id is a configuration error") {
  CHECK(parse_dataset_id("cifar10") == DatasetId::Cifar10);
  CHECK(parse_dataset_id("cifar100") == DatasetId::Cifar100);
  CHECK_THROWS_AS(parse_dataset_id("mnist"), ConfigError);
  CHECK_THROWS_AS(load_dataset("imagenet", "/nonexistent", 0), ConfigError);
}

TEST_CASE("missing archive is a file error naming the expected location") {
  const testing::ScratchDir tmp("data_missing");
  try {
    load_dataset("cifar10", tmp.path(), 0);
    FAIL("expected FileError");
  } catch (const FileError& e) {
    CHECK(std::string(e.what()).find("cifar-10-batches-bin") != std::string::npos);
  }
}

TEST_CASE("CIFAR-10 directory layout loads and splits deterministically") {
  const testing::ScratchDir tmp("data_c10");
  make_cifar10_dir(tmp.path());
  const DatasetSplit a = load_dataset("cifar10", tmp.path(), 7);
  CHECK(a.classes == 10);
  CHECK(a.train.size() == 45000);
  CHECK(a.val.size() == 5000);
  CHECK(a.test.size() == 10000);
  // Archive order is preserved through source_index and pixel placement.
  for (std::size_t i = 0; i < a.train.size(); i += 997) {
    CHECK(record_id(a.train, i) == (a.train.source_index[i] & 0xffff));
    CHECK(a.train.labels[i] == static_cast<int>(a.train.source_index[i] % 10));
  }
  CHECK(record_id(a.test, 123) == ((50000 + 123) & 0xffff));
  const ImageBatch b = a.test.batch(0, 1);
  CHECK(b.data.back() == doctest::Approx(0xab / 255.0f));

  const DatasetSplit again = load_dataset("cifar10", tmp.path(), 7);
  CHECK(again.val.source_index == a.val.source_index);
  const DatasetSplit other = load_dataset("cifar10", tmp.path(), 8);
  CHECK(other.val.source_index != a.val.source_index);


  // A truncated batch file is a file error naming it.
  const fs::path bad = tmp.path() / "cifar-10-batches-bin" / "data_batch_3.bin";
  fs::resize_file(bad, fs::file_size(bad) - 100);
  try {
    load_dataset("cifar10", tmp.path(), 7);
    FAIL("expected FileError");
  } catch (const FileError& e) {
    CHECK(std::string(e.what()).find("data_batch_3.bin") != std::string::npos);
  }
}

TEST_CASE("CIFAR-100 tar.gz layout loads with fine labels") {
  const testing::ScratchDir tmp("data_c100");
  make_cifar100_tgz(tmp.path());
  const DatasetSplit s = load_dataset("cifar100", tmp.path(), 0);
  CHECK(s.classes == 100);
  CHECK(s.train.size() == 47500);
  CHECK(s.val.size() == 2500);
  CHECK(s.test.size() == 10000);
  for (std::size_t i = 0; i < s.val.size(); i += 101) {
    CHECK(s.val.labels[i] == static_cast<int>(s.val.source_index[i] % 100));
  }
}

TEST_CASE("random_subset and subsample") {
  const ImageSet set = testing::synthetic_images(50, 5, 2, 4);
  const ImageSet sub = random_subset(set, 20, 3);
  CHECK(sub.size() == 20);
  CHECK(std::is_sorted(sub.source_index.begin(), sub.source_index.end()));
  CHECK(std::adjacent_find(sub.source_index.begin(), sub.source_index.end()) ==
        sub.source_index.end());
  CHECK(random_subset(set, 20, 3).source_index == sub.source_index);
  CHECK(random_subset(set, 50, 3).size() == 50);
  CHECK_THROWS_AS(random_subset(set, 51, 3), ConfigError);

  DatasetSplit split;
  split.train = set;
  split.val = set;
  split.test = set;
  split.classes = 5;
  const DatasetSplit small = subsample(split, {10, 5, 7}, 1);
  CHECK(small.train.size() == 10);
  CHECK(small.val.size() == 5);
  CHECK(small.test.size() == 7);
  CHECK(small.classes == 5);
}

TEST_CASE("image set accessors") {
  ImageSet s;
  s.channels = 1;
  s.height = s.width = 2;
  const std::vector<std::uint8_t> px{0, 51, 102, 255};
  s.push_back(px, 3, 9);
  const LabeledImage img = s.get(0);
  CHECK(img.label == 3);
  CHECK(img.pixels.data[1] == doctest::Approx(0.2f));
  CHECK(img.pixels.data[3] == 1.0f);
  CHECK_THROWS_AS(s.get(1), DomainError);
  CHECK(s.to_list().size() == 1);
}
