#include "protnet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

namespace protnet {

namespace {

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

void read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->size) png_error(png, "unexpected end of PNG data");
  std::memcpy(out, cur->data + cur->pos, len);
  cur->pos += len;
}

void write_to_vector(png_structp png, png_bytep in, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + len);
}

void flush_noop(png_structp) {}

// libpng reports errors by longjmp; the message is stashed here first.
void on_error(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<char*>(png_get_error_ptr(png));
  std::strncpy(buf, msg, 255);
  buf[255] = '\0';
  png_longjmp(png, 1);
}

void on_warning(png_structp, png_const_charp) {}

}  // namespace

float quantize(float v, int bit_depth) {
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<float>(std::round(c * maxv) / maxv);
}

Tensor<float> quantize(const Tensor<float>& t, int bit_depth) {
  Tensor<float> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = quantize(t.data[i], bit_depth);
  return out;
}

std::vector<std::uint8_t> encode_png(const Tensor<float>& image, int bit_depth,
                                     const PngText& text) {
  const Shape s = image.shape;
  if (s.n != 1 || (s.c != 1 && s.c != 3) || s.h == 0 || s.w == 0) {
    throw DomainError("encode_png: expected [1, 1|3, H, W] image, got " + s.str());
  }
  if (bit_depth != 8 && bit_depth != 16) throw DomainError("encode_png: bit depth must be 8 or 16");

  const std::size_t bpp = static_cast<std::size_t>(bit_depth / 8);
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<std::uint8_t> raw(s.h * s.w * s.c * bpp);
  for (std::size_t y = 0; y < s.h; ++y) {
    for (std::size_t x = 0; x < s.w; ++x) {
      for (std::size_t c = 0; c < s.c; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(0, c, y, x)), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * maxv));
        std::uint8_t* p = raw.data() + ((y * s.w + x) * s.c + c) * bpp;
        if (bpp == 2) {
          p[0] = static_cast<std::uint8_t>(q >> 8);  // PNG samples are big-endian
          p[1] = static_cast<std::uint8_t>(q & 0xff);
        } else {
          p[0] = static_cast<std::uint8_t>(q);
        }
      }
    }
  }
  std::vector<png_bytep> rows(s.h);
  for (std::size_t y = 0; y < s.h; ++y) rows[y] = raw.data() + y * s.w * s.c * bpp;

  std::vector<std::string> keys, values;
  for (const auto& [k, v] : text) {
    keys.push_back(k);
    values.push_back(v);
  }
  std::vector<png_text> chunks(keys.size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    chunks[i].compression = PNG_TEXT_COMPRESSION_NONE;
    chunks[i].key = keys[i].data();
    chunks[i].text = values[i].data();
    chunks[i].text_length = values[i].size();
  }

  std::vector<std::uint8_t> out;
  char err[256] = {0};
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, on_error, on_warning);
  if (!png) throw DomainError("encode_png: libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DomainError(std::string("encode_png: ") + err);
  }
  png_set_write_fn(png, &out, write_to_vector, flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h), bit_depth,
               s.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Tensor<float> decode_png(std::span<const std::uint8_t> bytes, PngText* text) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw DomainError("decode_png: not a PNG payload");
  }
  ReadCursor cursor{bytes.data(), bytes.size(), 0};
  char err[256] = {0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, on_error, on_warning);
  if (!png) throw DomainError("decode_png: libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  Tensor<float> image;
  std::string failure;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DomainError(std::string("decode_png: ") + err);
  }
  png_set_read_fn(png, &cursor, read_from_memory);
  png_read_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  const int interlace = png_get_interlace_type(png, info);
  if ((color != PNG_COLOR_TYPE_RGB && color != PNG_COLOR_TYPE_GRAY) ||
      (depth != 8 && depth != 16) || interlace != PNG_INTERLACE_NONE) {
    failure = "unsupported PNG layout (need 8/16-bit gray or RGB, non-interlaced)";
  } else {
    const std::size_t c = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const std::size_t bpp = static_cast<std::size_t>(depth / 8);
    const double maxv = depth == 16 ? 65535.0 : 255.0;
    png_bytepp rows = png_get_rows(png, info);
    image = Tensor<float>(Shape{1, c, h, w});
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const png_bytep p = rows[y] + (x * c + ch) * bpp;
          const unsigned q = bpp == 2 ? (static_cast<unsigned>(p[0]) << 8) | p[1] : p[0];
          image.at(0, ch, y, x) = static_cast<float>(q / maxv);
        }
      }
    }
    if (text) {
      png_textp chunks = nullptr;
      int count = 0;
      png_get_text(png, info, &chunks, &count);
      for (int i = 0; i < count; ++i) {
        (*text)[chunks[i].key] = std::string(chunks[i].text, chunks[i].text_length);
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!failure.empty()) throw DomainError("decode_png: " + failure);
  return image;
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FileError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FileError("write failed for " + path.string());
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image, int bit_depth,
               const PngText& text) {
  write_bytes(path, encode_png(image, bit_depth, text));
}

Tensor<float> read_png(const std::filesystem::path& path, PngText* text) {
  const auto bytes = read_bytes(path);
  try {
    return decode_png(bytes, text);
  } catch (const DomainError& e) {
    throw FileError(path.string() + ": " + e.what());
  }
}

}  // namespace protnet
