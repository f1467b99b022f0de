#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "protnet/rng.hpp"
#include "protnet/tensor.hpp"

namespace protnet {

enum class Mode { Train, Eval };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}
};

/// Named view of a tensor that belongs to a network's persistent state
/// (trainable parameters and running statistics).
template <typename T>
struct StateRef {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;
template <typename T>
using StateList = std::vector<StateRef<T>>;

/// Row-major C = alpha * op(A) * op(B) + beta * C, dispatched to BLAS.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c);

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride, std::size_t pad, bool bias, Rng& rng);

  Shape output_shape(const Shape& in) const;
  Tensor<T> forward(const Tensor<T>& x) const;
  /// Returns dL/dx; adds dL/dW (and dL/db) into the parameter grads when
  /// `accumulate` is set.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool accumulate);
  void collect(ParamList<T>& params, StateList<T>& state);

  std::size_t in_channels() const noexcept { return in_; }
  std::size_t out_channels() const noexcept { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  bool has_bias_ = false;
  Parameter<T> weight_, bias_;
};

/// 2x2 kernel, stride 2 transposed convolution (exact 2x upsampling).
template <typename T>
class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(const std::string& name, std::size_t in_ch, std::size_t out_ch, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool accumulate);
  void collect(ParamList<T>& params, StateList<T>& state);

 private:
  std::size_t in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;  // weight: [in, out, 2, 2]
};

template <typename T>
class BatchNorm2d {
 public:
  struct Cache {
    Mode mode = Mode::Eval;
    Tensor<T> xhat;
    std::vector<T> mean, var, invstd;
  };

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels);

  /// Train mode normalizes with batch statistics (recorded in `cache`);
  /// eval mode uses the running statistics. Never mutates the layer.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache& cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& dy, bool accumulate);
  /// Folds the batch statistics of a train-mode pass into the running stats.
  void commit(const Cache& cache);
  void collect(ParamList<T>& params, StateList<T>& state);

 private:
  std::size_t channels_ = 0;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  std::string name_;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy, bool accumulate);
  void collect(ParamList<T>& params, StateList<T>& state);

 private:
  std::size_t in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Gradient of ReLU given its output.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy);

/// 2x2 max pooling, stride 2. `argmax` receives the flat input index of each
/// output element.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::size_t>& argmax);
template <typename T>
Tensor<T> maxpool2_backward(const Shape& in, const std::vector<std::size_t>& argmax,
                            const Tensor<T>& dy);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);
template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& dy);

/// Channel concatenation [a | b].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void split_channels(const Tensor<T>& d, std::size_t ca, Tensor<T>& da, Tensor<T>& db);

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

}  // namespace protnet
