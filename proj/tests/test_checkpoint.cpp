#include <fstream>

#include "doctest.h"
#include "properties.hpp"
#include "protnet/image_io.hpp"
#include "scratch.hpp"

using namespace protnet;
using testing::random_images;

namespace {

Checkpoint sample_checkpoint() {
  auto h = build_transform_net(testing::toy_transform(1, 4), 1);
  auto psi = build_classifier(testing::toy_classifier(3), 2);
  Checkpoint ck;
  ck.manifest.alpha = 0.005;
  ck.manifest.epoch = 12;
  add_network(ck, "h", h);
  add_network(ck, "psi", psi);
  return ck;
}

}  // namespace

TEST_CASE("property: checkpoint round-trip") {
  const auto p = testing::prop_checkpoint_roundtrip(3);
  INFO(p.detail);
  CHECK(p.ok);
}

TEST_CASE("checkpoint files round-trip and keep the manifest") {
  const testing::ScratchDir tmp("ckpt");
  const Checkpoint ck = sample_checkpoint();
  save_checkpoint(ck, tmp / "a.ckpt");
  const Checkpoint back = load_checkpoint(tmp / "a.ckpt");
  CHECK(back.manifest.alpha == 0.005);
  CHECK(back.manifest.epoch == 12);
  CHECK(has_network(back, "h"));
  CHECK(has_network(back, "psi"));
  CHECK_FALSE(has_network(back, "g"));
  CHECK(encode_checkpoint(back) == encode_checkpoint(ck));
  CHECK_THROWS_AS(load_checkpoint(tmp / "missing.ckpt"), FileError);
  CHECK_THROWS_AS(load_transform_net(back, "g"), SerializationError);
  CHECK_THROWS_AS(load_transform_net(back, "psi"), SerializationError);
}

TEST_CASE("damaged archives are serialization errors") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(cut)), SerializationError);
  }
  for (std::size_t at : {std::size_t{20}, bytes.size() / 3, bytes.size() - 40}) {
    auto bad = bytes;
    bad[at] ^= 0x10;
    CHECK_THROWS_AS(decode_checkpoint(bad), SerializationError);
  }
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), SerializationError);

  const testing::ScratchDir tmp("ckpt_trunc");
  write_bytes(tmp / "t.ckpt", std::span(bytes).first(bytes.size() - 10));
  CHECK_THROWS_AS(load_checkpoint(tmp / "t.ckpt"), SerializationError);
}

TEST_CASE("restore_network requires matching topology") {
  const Checkpoint ck = sample_checkpoint();
  auto same = build_transform_net(testing::toy_transform(1, 4), 99);
  restore_network(ck, "h", same);
  auto ref = load_transform_net(ck);
  CHECK(testing::same_parameters(same, ref));
  auto wider = build_transform_net(testing::toy_transform(1, 8), 99);
  CHECK_THROWS_AS(restore_network(ck, "h", wider), SerializationError);
}

TEST_CASE("restored networks compute the same outputs") {
  Rng rng(4);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(sample_checkpoint()));
  const auto h = load_transform_net(ck);
  const auto psi = load_classifier(ck);
  auto h0 = build_transform_net(testing::toy_transform(1, 4), 1);
  const auto x = random_images(Shape{2, 3, 8, 8}, rng);
  CHECK(forward_transform(h, x).data == forward_transform(h0, x).data);
  CHECK(classify(psi, x).size() == 2);
}

TEST_CASE("sha256 of known inputs") {
  CHECK(sha256_hex({}) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const std::string abc = "abc";
  CHECK(sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(abc.data()), 3)) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("PNG round-trips at 8 and 16 bits") {
  Rng rng(5);
  Tensor<float> img(Shape{1, 3, 5, 4});
  for (auto& v : img.data) v = static_cast<float>(rng() % 256) / 255.0f;
  CHECK(decode_png(encode_png(img, 8)).data == img.data);
  CHECK(decode_png(encode_png(img, 16)).data == img.data);

  const auto any = random_images(Shape{1, 1, 3, 3}, rng);
  const auto q = quantize(any, 16);
  CHECK(decode_png(encode_png(any, 16)).data == q.data);
  for (std::size_t i = 0; i < any.size(); ++i) {
    CHECK(std::abs(q.data[i] - any.data[i]) <= 0.5f / 65535.0f + 1e-7f);
  }
  CHECK(quantize(2.0f, 8) == 1.0f);
  CHECK(quantize(-1.0f, 16) == 0.0f);

  PngText text{{"layout", "{\"rows\":1}"}};
  PngText back;
  decode_png(encode_png(img, 16, text), &back);
  CHECK(back.at("layout") == "{\"rows\":1}");
}

TEST_CASE("PNG errors") {
  Rng rng(6);
  const auto img = random_images(Shape{1, 3, 4, 4}, rng);
  CHECK_THROWS_AS(encode_png(random_images(Shape{2, 3, 4, 4}, rng)), DomainError);
  CHECK_THROWS_AS(encode_png(img, 12), DomainError);
  const std::vector<std::uint8_t> junk{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK_THROWS_AS(decode_png(junk), DomainError);
  auto bytes = encode_png(img);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS_AS(decode_png(bytes), DomainError);
  CHECK_THROWS_AS(read_png("/nonexistent/x.png"), FileError);
}
