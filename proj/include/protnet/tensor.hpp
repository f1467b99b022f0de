#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "protnet/errors.hpp"

namespace protnet {

/// NCHW extent. Vectors and matrices use trailing unit dimensions.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t size() const noexcept { return n * c * h * w; }
  std::size_t sample_size() const noexcept { return c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

/// Dense NCHW array owning its storage.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}

  std::size_t size() const noexcept { return data.size(); }
  T* ptr() noexcept { return data.data(); }
  const T* ptr() const noexcept { return data.data(); }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape.c + c) * shape.h + h) * shape.w + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape.c + c) * shape.h + h) * shape.w + w];
  }

  std::span<T> sample(std::size_t n) {
    return {data.data() + n * shape.sample_size(), shape.sample_size()};
  }
  std::span<const T> sample(std::size_t n) const {
    return {data.data() + n * shape.sample_size(), shape.sample_size()};
  }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

inline std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + "]";
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw DomainError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

using ImageBatch = Tensor<float>;

/// Copies samples `[first, first+count)` of `src` into a new batch.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& src, std::size_t first, std::size_t count) {
  Tensor<T> out(Shape{count, src.shape.c, src.shape.h, src.shape.w});
  const auto per = src.shape.sample_size();
  std::copy_n(src.data.begin() + static_cast<std::ptrdiff_t>(first * per), count * per,
              out.data.begin());
  return out;
}

}  // namespace protnet
