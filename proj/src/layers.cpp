#include "protnet/layers.hpp"

#include <cblas.h>

#include <cmath>
#include <limits>

namespace protnet {

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 float alpha, const float* a, const float* b, float beta, float* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, const double* b, double beta, double* c) {
  const int lda = static_cast<int>(trans_a ? m : k);
  const int ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, lda, b, ldb, beta, c, static_cast<int>(n));
}

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

// [C,H,W] -> [C*k*k, Ho*Wo]
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const auto ip = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ip;
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(out, wo, T(0));
            continue;
          }
          const T* in = x + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ip;
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T(0)
                          : in[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  const auto ip = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - ip;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* out = x + (ch * h + static_cast<std::size_t>(iy)) * w;
          const T* in = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - ip;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, std::size_t in_ch, std::size_t out_ch,
                  std::size_t kernel, std::size_t stride, std::size_t pad, bool bias, Rng& rng)
    : in_(in_ch),
      out_(out_ch),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      has_bias_(bias),
      weight_(name + ".weight", Shape{out_ch, in_ch, kernel, kernel}) {
  if (in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0) {
    throw ConfigError("conv " + name + ": channel counts, kernel and stride must be positive");
  }
  // He initialization for ReLU networks.
  fill_normal(weight_.value, std::sqrt(2.0 / static_cast<double>(in_ch * kernel * kernel)), rng);
  if (has_bias_) bias_ = Parameter<T>(name + ".bias", Shape{out_ch, 1, 1, 1});
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  if (in.c != in_) {
    throw DomainError("conv: expected " + std::to_string(in_) + " input channels, got " +
                      std::to_string(in.c));
  }
  if (in.h + 2 * pad_ < k_ || in.w + 2 * pad_ < k_) {
    throw DomainError("conv: input " + in.str() + " smaller than kernel");
  }
  return Shape{in.n, out_, (in.h + 2 * pad_ - k_) / stride_ + 1,
               (in.w + 2 * pad_ - k_) / stride_ + 1};
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  const Shape os = output_shape(x.shape);
  Tensor<T> y(os);
  const std::size_t ckk = in_ * k_ * k_, hw = os.h * os.w;
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<T> cols(direct ? 0 : ckk * hw);
  for (std::size_t n = 0; n < x.shape.n; ++n) {
    const T* xn = x.sample(n).data();
    if (!direct) {
      im2col(xn, in_, x.shape.h, x.shape.w, k_, stride_, pad_, os.h, os.w, cols.data());
    }
    T* yn = y.sample(n).data();
    if (has_bias_) {
      for (std::size_t o = 0; o < out_; ++o) std::fill_n(yn + o * hw, hw, bias_.value.data[o]);
    }
    gemm<T>(false, false, out_, hw, ckk, T(1), weight_.value.ptr(), direct ? xn : cols.data(),
            has_bias_ ? T(1) : T(0), yn);
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, bool accumulate) {
  const Shape os = output_shape(x.shape);
  require_same_shape(os, dy.shape, "conv backward");
  Tensor<T> dx(x.shape);
  const std::size_t ckk = in_ * k_ * k_, hw = os.h * os.w;
  const bool direct = k_ == 1 && stride_ == 1 && pad_ == 0;
  std::vector<T> cols(direct ? 0 : ckk * hw), dcols(direct ? 0 : ckk * hw);
  for (std::size_t n = 0; n < x.shape.n; ++n) {
    const T* xn = x.sample(n).data();
    const T* dyn = dy.sample(n).data();
    if (accumulate) {
      if (!direct) {
        im2col(xn, in_, x.shape.h, x.shape.w, k_, stride_, pad_, os.h, os.w, cols.data());
      }
      gemm<T>(false, true, out_, ckk, hw, T(1), dyn, direct ? xn : cols.data(), T(1),
              weight_.grad.ptr());
      if (has_bias_) {
        for (std::size_t o = 0; o < out_; ++o) {
          T s = 0;
          for (std::size_t i = 0; i < hw; ++i) s += dyn[o * hw + i];
          bias_.grad.data[o] += s;
        }
      }
    }
    T* dxn = dx.sample(n).data();
    if (direct) {
      gemm<T>(true, false, ckk, hw, out_, T(1), weight_.value.ptr(), dyn, T(0), dxn);
    } else {
      gemm<T>(true, false, ckk, hw, out_, T(1), weight_.value.ptr(), dyn, T(0), dcols.data());
      col2im(dcols.data(), in_, x.shape.h, x.shape.w, k_, stride_, pad_, os.h, os.w, dxn);
    }
  }
  return dx;
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& params, StateList<T>& state) {
  params.push_back(&weight_);
  state.push_back({weight_.name, &weight_.value});
  if (has_bias_) {
    params.push_back(&bias_);
    state.push_back({bias_.name, &bias_.value});
  }
}

// ------------------------------------------------------ ConvTranspose2x2

template <typename T>
ConvTranspose2x2<T>::ConvTranspose2x2(const std::string& name, std::size_t in_ch,
                                      std::size_t out_ch, Rng& rng)
    : in_(in_ch),
      out_(out_ch),
      weight_(name + ".weight", Shape{in_ch, out_ch, 2, 2}),
      bias_(name + ".bias", Shape{out_ch, 1, 1, 1}) {
  if (in_ch == 0 || out_ch == 0) throw ConfigError("upconv " + name + ": empty channels");
  fill_normal(weight_.value, std::sqrt(2.0 / static_cast<double>(in_ch)), rng);
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::forward(const Tensor<T>& x) const {
  if (x.shape.c != in_) throw DomainError("upconv: channel mismatch");
  const std::size_t h = x.shape.h, w = x.shape.w, hw = h * w;
  Tensor<T> y(Shape{x.shape.n, out_, 2 * h, 2 * w});
  std::vector<T> cols(out_ * 4 * hw);
  for (std::size_t n = 0; n < x.shape.n; ++n) {
    // cols[(o,a,b), p] = sum_c W[c,(o,a,b)] x[c,p]
    gemm<T>(true, false, out_ * 4, hw, in_, T(1), weight_.value.ptr(), x.sample(n).data(), T(0),
            cols.data());
    for (std::size_t o = 0; o < out_; ++o) {
      const T b = bias_.value.data[o];
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t bb = 0; bb < 2; ++bb) {
          const T* src = cols.data() + ((o * 2 + a) * 2 + bb) * hw;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              y.at(n, o, 2 * i + a, 2 * j + bb) = src[i * w + j] + b;
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::backward(const Tensor<T>& x, const Tensor<T>& dy,
                                        bool accumulate) {
  const std::size_t h = x.shape.h, w = x.shape.w, hw = h * w;
  require_same_shape(Shape{x.shape.n, out_, 2 * h, 2 * w}, dy.shape, "upconv backward");
  Tensor<T> dx(x.shape);
  std::vector<T> dcols(out_ * 4 * hw);
  for (std::size_t n = 0; n < x.shape.n; ++n) {
    for (std::size_t o = 0; o < out_; ++o) {
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t bb = 0; bb < 2; ++bb) {
          T* dst = dcols.data() + ((o * 2 + a) * 2 + bb) * hw;
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) dst[i * w + j] = dy.at(n, o, 2 * i + a, 2 * j + bb);
          }
        }
      }
    }
    gemm<T>(false, false, in_, hw, out_ * 4, T(1), weight_.value.ptr(), dcols.data(), T(0),
            dx.sample(n).data());
    if (accumulate) {
      gemm<T>(false, true, in_, out_ * 4, hw, T(1), x.sample(n).data(), dcols.data(), T(1),
              weight_.grad.ptr());
      for (std::size_t o = 0; o < out_; ++o) {
        T s = 0;
        for (std::size_t i = 0; i < 4 * hw; ++i) s += dcols[o * 4 * hw + i];
        bias_.grad.data[o] += s;
      }
    }
  }
  return dx;
}

template <typename T>
void ConvTranspose2x2<T>::collect(ParamList<T>& params, StateList<T>& state) {
  params.push_back(&weight_);
  params.push_back(&bias_);
  state.push_back({weight_.name, &weight_.value});
  state.push_back({bias_.name, &bias_.value});
}

// ----------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const std::string& name, std::size_t channels)
    : channels_(channels),
      gamma_(name + ".gamma", Shape{channels, 1, 1, 1}),
      beta_(name + ".beta", Shape{channels, 1, 1, 1}),
      running_mean_(Shape{channels, 1, 1, 1}),
      running_var_(Shape{channels, 1, 1, 1}, T(1)),
      name_(name) {
  std::fill(gamma_.value.data.begin(), gamma_.value.data.end(), T(1));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, Mode mode, Cache& cache) const {
  if (x.shape.c != channels_) throw DomainError("batchnorm: channel mismatch");
  const std::size_t n = x.shape.n, hw = x.shape.plane();
  cache.mode = mode;
  cache.mean.assign(channels_, T(0));
  cache.var.assign(channels_, T(0));
  cache.invstd.assign(channels_, T(0));
  if (mode == Mode::Train) {
    const double count = static_cast<double>(n * hw);
    for (std::size_t c = 0; c < channels_; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.ptr() + (i * channels_ + c) * hw;
        for (std::size_t j = 0; j < hw; ++j) s += p[j];
      }
      const double mean = s / count;
      double v = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.ptr() + (i * channels_ + c) * hw;
        for (std::size_t j = 0; j < hw; ++j) v += (p[j] - mean) * (p[j] - mean);
      }
      cache.mean[c] = static_cast<T>(mean);
      cache.var[c] = static_cast<T>(v / count);
      cache.invstd[c] = static_cast<T>(1.0 / std::sqrt(v / count + kEps));
    }
  } else {
    for (std::size_t c = 0; c < channels_; ++c) {
      cache.mean[c] = running_mean_.data[c];
      cache.var[c] = running_var_.data[c];
      cache.invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_.data[c]) + kEps));
    }
  }
  cache.xhat = Tensor<T>(x.shape);
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const std::size_t off = (i * channels_ + c) * hw;
      const T m = cache.mean[c], is = cache.invstd[c], g = gamma_.value.data[c],
              b = beta_.value.data[c];
      for (std::size_t j = 0; j < hw; ++j) {
        const T xh = (x.data[off + j] - m) * is;
        cache.xhat.data[off + j] = xh;
        y.data[off + j] = g * xh + b;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Cache& cache, const Tensor<T>& dy, bool accumulate) {
  require_same_shape(cache.xhat.shape, dy.shape, "batchnorm backward");
  const std::size_t n = dy.shape.n, hw = dy.shape.plane();
  Tensor<T> dx(dy.shape);
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * channels_ + c) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        sum_dy += dy.data[off + j];
        sum_dy_xhat += dy.data[off + j] * cache.xhat.data[off + j];
      }
    }
    if (accumulate) {
      gamma_.grad.data[c] += static_cast<T>(sum_dy_xhat);
      beta_.grad.data[c] += static_cast<T>(sum_dy);
    }
    const T g = gamma_.value.data[c], is = cache.invstd[c];
    if (cache.mode == Mode::Train) {
      const double count = static_cast<double>(n * hw);
      const T mean_dy = static_cast<T>(sum_dy / count);
      const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * channels_ + c) * hw;
        for (std::size_t j = 0; j < hw; ++j) {
          dx.data[off + j] =
              g * is * (dy.data[off + j] - mean_dy - cache.xhat.data[off + j] * mean_dy_xhat);
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * channels_ + c) * hw;
        for (std::size_t j = 0; j < hw; ++j) dx.data[off + j] = g * is * dy.data[off + j];
      }
    }
  }
  return dx;
}

template <typename T>
void BatchNorm2d<T>::commit(const Cache& cache) {
  if (cache.mode != Mode::Train) return;
  const double count = static_cast<double>(cache.xhat.shape.n * cache.xhat.shape.plane());
  const double unbias = count > 1 ? count / (count - 1) : 1.0;
  for (std::size_t c = 0; c < channels_; ++c) {
    running_mean_.data[c] = static_cast<T>((1 - kMomentum) * running_mean_.data[c] +
                                           kMomentum * cache.mean[c]);
    running_var_.data[c] = static_cast<T>((1 - kMomentum) * running_var_.data[c] +
                                          kMomentum * cache.var[c] * unbias);
  }
}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& params, StateList<T>& state) {
  params.push_back(&gamma_);
  params.push_back(&beta_);
  state.push_back({gamma_.name, &gamma_.value});
  state.push_back({beta_.name, &beta_.value});
  state.push_back({name_ + ".running_mean", &running_mean_});
  state.push_back({name_ + ".running_var", &running_var_});
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : in_(in),
      out_(out),
      weight_(name + ".weight", Shape{out, in, 1, 1}),
      bias_(name + ".bias", Shape{out, 1, 1, 1}) {
  if (in == 0 || out == 0) throw ConfigError("linear " + name + ": empty dimension");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(weight_.value, bound, rng);
  fill_uniform(bias_.value, bound, rng);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  if (x.shape.sample_size() != in_) throw DomainError("linear: input width mismatch");
  const std::size_t n = x.shape.n;
  Tensor<T> y(Shape{n, out_, 1, 1});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(bias_.value.ptr(), out_, y.ptr() + i * out_);
  gemm<T>(false, true, n, out_, in_, T(1), x.ptr(), weight_.value.ptr(), T(1), y.ptr());
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& x, const Tensor<T>& dy, bool accumulate) {
  const std::size_t n = x.shape.n;
  Tensor<T> dx(x.shape);
  gemm<T>(false, false, n, in_, out_, T(1), dy.ptr(), weight_.value.ptr(), T(0), dx.ptr());
  if (accumulate) {
    gemm<T>(true, false, out_, in_, n, T(1), dy.ptr(), x.ptr(), T(1), weight_.grad.ptr());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < out_; ++o) bias_.grad.data[o] += dy.data[i * out_ + o];
    }
  }
  return dx;
}

template <typename T>
void Linear<T>::collect(ParamList<T>& params, StateList<T>& state) {
  params.push_back(&weight_);
  params.push_back(&bias_);
  state.push_back({weight_.name, &weight_.value});
  state.push_back({bias_.name, &bias_.value});
}

// ------------------------------------------------------ stateless layers

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] = y.data[i] > T(0) ? dy.data[i] : T(0);
  return dx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.data[i];
    // Branches keep exp() from overflowing for large |v|.
    if (v >= 0) {
      y.data[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y.data[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  Tensor<T> dx(dy.shape);
  for (std::size_t i = 0; i < dy.size(); ++i) {
    dx.data[i] = dy.data[i] * y.data[i] * (T(1) - y.data[i]);
  }
  return dx;
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::size_t>& argmax) {
  const Shape& s = x.shape;
  if (s.h % 2 != 0 || s.w % 2 != 0) throw DomainError("maxpool2: odd spatial size " + s.str());
  Tensor<T> y(Shape{s.n, s.c, s.h / 2, s.w / 2});
  argmax.resize(y.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = nc * s.h * s.w;
    for (std::size_t i = 0; i < s.h / 2; ++i) {
      for (std::size_t j = 0; j < s.w / 2; ++j, ++o) {
        std::size_t best = base + 2 * i * s.w + 2 * j;
        for (std::size_t a = 0; a < 2; ++a) {
          for (std::size_t b = 0; b < 2; ++b) {
            const std::size_t idx = base + (2 * i + a) * s.w + 2 * j + b;
            if (x.data[idx] > x.data[best]) best = idx;
          }
        }
        argmax[o] = best;
        y.data[o] = x.data[best];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool2_backward(const Shape& in, const std::vector<std::size_t>& argmax,
                            const Tensor<T>& dy) {
  Tensor<T> dx(in);
  for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax[o]] += dy.data[o];
  return dx;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape& s = x.shape;
  Tensor<T> y(Shape{s.n, s.c, 1, 1});
  const std::size_t hw = s.plane();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += x.data[nc * hw + j];
    y.data[nc] = acc / static_cast<T>(hw);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in, const Tensor<T>& dy) {
  Tensor<T> dx(in);
  const std::size_t hw = in.plane();
  for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
    const T g = dy.data[nc] / static_cast<T>(hw);
    std::fill_n(dx.ptr() + nc * hw, hw, g);
  }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
    throw DomainError("concat: incompatible " + a.shape.str() + " and " + b.shape.str());
  }
  Tensor<T> y(Shape{a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w});
  const std::size_t sa = a.shape.sample_size(), sb = b.shape.sample_size();
  for (std::size_t n = 0; n < a.shape.n; ++n) {
    std::copy_n(a.ptr() + n * sa, sa, y.ptr() + n * (sa + sb));
    std::copy_n(b.ptr() + n * sb, sb, y.ptr() + n * (sa + sb) + sa);
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& d, std::size_t ca, Tensor<T>& da, Tensor<T>& db) {
  const Shape& s = d.shape;
  da = Tensor<T>(Shape{s.n, ca, s.h, s.w});
  db = Tensor<T>(Shape{s.n, s.c - ca, s.h, s.w});
  const std::size_t sa = da.shape.sample_size(), sb = db.shape.sample_size();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(d.ptr() + n * (sa + sb), sa, da.ptr() + n * sa);
    std::copy_n(d.ptr() + n * (sa + sb) + sa, sb, db.ptr() + n * sb);
  }
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst.shape, src.shape, "add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

#define PROTNET_INSTANTIATE(T)                                                                  \
  template class Conv2d<T>;                                                                    \
  template class ConvTranspose2x2<T>;                                                          \
  template class BatchNorm2d<T>;                                                               \
  template class Linear<T>;                                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> maxpool2(const Tensor<T>&, std::vector<std::size_t>&);                    \
  template Tensor<T> maxpool2_backward(const Shape&, const std::vector<std::size_t>&,          \
                                       const Tensor<T>&);                                      \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                        \
  template Tensor<T> global_avg_pool_backward(const Shape&, const Tensor<T>&);                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template void split_channels(const Tensor<T>&, std::size_t, Tensor<T>&, Tensor<T>&);         \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);

PROTNET_INSTANTIATE(float)
PROTNET_INSTANTIATE(double)

#undef PROTNET_INSTANTIATE

}  // namespace protnet
