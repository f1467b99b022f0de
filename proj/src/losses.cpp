#include "protnet/losses.hpp"

#include <cmath>

namespace protnet {

LossBreakdown combine_loss(double class_term, double feat_term, double alpha) {
  if (alpha < 0.0) throw DomainError("alpha must be >= 0");
  return {class_term, feat_term, alpha, class_term - alpha * feat_term};
}

double classification_loss(std::span<const double> y_hat, const OneHotLabel& y) {
  if (y_hat.size() != y.size()) {
    throw DomainError("classification_loss: prediction length " + std::to_string(y_hat.size()) +
                      " != label length " + std::to_string(y.size()));
  }
  double loss = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (y.entries[j] != 0.0) loss -= y.entries[j] * std::log(std::max(y_hat[j], kProbabilityFloor));
  }
  return loss;
}

double feature_loss(const Tensor<float>& x, const Tensor<float>& x_hat,
                    const FeatureExtractor<float>& phi) {
  require_same_shape(x.shape, x_hat.shape, "feature_loss");
  const Tensor<float> fx = phi.extract(x);
  const Tensor<float> fxh = phi.extract(x_hat);
  double acc = 0.0;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    const double d = static_cast<double>(fxh.data[i]) - fx.data[i];
    acc += d * d;
  }
  // Per-image normalization by C_k * H_k * W_k.
  return acc / static_cast<double>(fx.size());
}

LossBreakdown transformation_loss(const Tensor<float>& x, const Tensor<float>& x_hat,
                                  const OneHotLabel& y, const Classifier<float>& psi,
                                  const FeatureExtractor<float>& phi, double alpha) {
  if (alpha < 0.0) throw DomainError("transformation_loss: alpha must be >= 0");
  return combine_loss(classification_loss(classify(psi, x_hat).front(), y),
                      feature_loss(x, x_hat, phi), alpha);
}

double batch_objective(const ImageBatch& x, std::span<const OneHotLabel> y,
                       const TransformNet<float>& h, const Classifier<float>& psi,
                       const FeatureExtractor<float>& phi, double alpha) {
  if (x.shape.n == 0) throw DomainError("batch_objective: empty batch");
  if (x.shape.n != y.size()) throw DomainError("batch_objective: |X| != |Y|");
  const ImageBatch x_hat = forward_transform(h, x);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.shape.n; ++i) {
    sum += transformation_loss(slice_batch(x, i, 1), slice_batch(x_hat, i, 1), y[i], psi, phi,
                               alpha)
               .total;
  }
  return sum / static_cast<double>(x.shape.n);
}

template <typename T>
ObjectiveResult evaluate_objective(const Tensor<T>& x, std::span<const int> labels,
                                   TransformNet<T>& h, Classifier<T>& psi,
                                   const FeatureExtractor<T>& phi, double alpha,
                                   const ObjectiveOptions& opt, ObjectiveTapes<T>* tapes) {
  const std::size_t m = x.shape.n;
  if (m == 0) throw DomainError("objective: empty batch");
  if (labels.size() != m) throw DomainError("objective: label count != batch size");
  const std::size_t c = psi.classes();

  ObjectiveTapes<T> local;
  ObjectiveTapes<T>& tp = tapes ? *tapes : local;
  const Tensor<T> x_hat = h.forward(x, opt.h_mode, tp.h);
  const Tensor<T> logits = psi.forward(x_hat, opt.psi_mode, tp.psi);

  ObjectiveResult r;
  r.sample_class.resize(m);
  r.sample_feat.resize(m);
  r.predictions.resize(m);
  const double log_floor = std::log(kProbabilityFloor);
  Tensor<T> dlogits(logits.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw DomainError("objective: label " + std::to_string(label) + " out of range");
    }
    const T* z = logits.ptr() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (z[j] > z[best]) best = j;
    }
    r.predictions[i] = static_cast<int>(best);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(z[j] - z[best]));
    const double lse = static_cast<double>(z[best]) + std::log(sum);
    const double log_p = static_cast<double>(z[label]) - lse;
    r.sample_class[i] = -std::max(log_p, log_floor);
    if (opt.backprop && log_p > log_floor) {
      for (std::size_t j = 0; j < c; ++j) {
        const double p = std::exp(static_cast<double>(z[j]) - lse);
        dlogits.data[i * c + j] =
            static_cast<T>((p - (static_cast<int>(j) == label ? 1.0 : 0.0)) / static_cast<double>(m));
      }
    }
  }

  typename FeatureExtractor<T>::Tape phi_tape;
  const Tensor<T> fx = phi.extract(x);
  const Tensor<T> fxh = phi.extract(x_hat, phi_tape);
  const std::size_t k = fx.shape.sample_size();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double d = static_cast<double>(fxh.data[i * k + j]) - fx.data[i * k + j];
      acc += d * d;
    }
    r.sample_feat[i] = acc / static_cast<double>(k);
  }

  for (std::size_t i = 0; i < m; ++i) {
    r.class_term += r.sample_class[i];
    r.feat_term += r.sample_feat[i];
  }
  r.class_term /= static_cast<double>(m);
  r.feat_term /= static_cast<double>(m);
  r.total = r.class_term - alpha * r.feat_term;

  if (opt.backprop) {
    Tensor<T> dx_hat = psi.backward(tp.psi, dlogits, opt.psi_grads);
    if (alpha != 0.0) {
      Tensor<T> dfeat(fxh.shape);
      const double scale = -alpha * 2.0 / (static_cast<double>(k) * static_cast<double>(m));
      for (std::size_t j = 0; j < dfeat.size(); ++j) {
        dfeat.data[j] = static_cast<T>(scale * (static_cast<double>(fxh.data[j]) - fx.data[j]));
      }
      add_inplace(dx_hat, phi.backward(phi_tape, dfeat));
    }
    h.backward(tp.h, dx_hat, true);
  }
  return r;
}

template ObjectiveResult evaluate_objective<float>(const Tensor<float>&, std::span<const int>,
                                                   TransformNet<float>&, Classifier<float>&,
                                                   const FeatureExtractor<float>&, double,
                                                   const ObjectiveOptions&,
                                                   ObjectiveTapes<float>*);
template ObjectiveResult evaluate_objective<double>(const Tensor<double>&, std::span<const int>,
                                                    TransformNet<double>&, Classifier<double>&,
                                                    const FeatureExtractor<double>&, double,
                                                    const ObjectiveOptions&,
                                                    ObjectiveTapes<double>*);

}  // namespace protnet
