#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protnet/tensor.hpp"

namespace protnet {

using PngText = std::map<std::string, std::string>;

/// Lossless PNG encoding of one [1, C, H, W] image (C = 1 or 3) with values
/// clamped to [0, 1] and quantized to `bit_depth` (8 or 16) bits.
std::vector<std::uint8_t> encode_png(const Tensor<float>& image, int bit_depth = 16,
                                     const PngText& text = {});

/// Decodes 8/16-bit grayscale or RGB PNG into a [1, C, H, W] image in [0, 1].
/// Malformed data raises DomainError.
Tensor<float> decode_png(std::span<const std::uint8_t> bytes, PngText* text = nullptr);

void write_png(const std::filesystem::path& path, const Tensor<float>& image, int bit_depth = 16,
               const PngText& text = {});
Tensor<float> read_png(const std::filesystem::path& path, PngText* text = nullptr);

/// Value actually stored for `v` at the given bit depth.
float quantize(float v, int bit_depth);
Tensor<float> quantize(const Tensor<float>& t, int bit_depth);

/// create_directories with failures reported as FileError.
void ensure_directory(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace protnet
