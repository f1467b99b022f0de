#pragma once

#include <span>
#include <vector>

#include "protnet/data.hpp"
#include "protnet/models.hpp"

namespace protnet {

/// Probability floor applied before the logarithm in the cross-entropy.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossBreakdown {
  double class_term = 0.0;
  double feat_term = 0.0;
  double alpha = 0.0;
  double total = 0.0;  // class_term - alpha * feat_term
};

/// Assembles class_term - alpha * feat_term.
LossBreakdown combine_loss(double class_term, double feat_term, double alpha);

/// Cross-entropy -sum_j y(j) ln(max(y_hat(j), 1e-12)).
double classification_loss(std::span<const double> y_hat, const OneHotLabel& y);

/// Mean squared distance between phi(x_hat) and phi(x) over the C_k*H_k*W_k
/// feature entries. x and x_hat are single images [1, C, H, W].
double feature_loss(const Tensor<float>& x, const Tensor<float>& x_hat,
                    const FeatureExtractor<float>& phi);

/// L_class(psi(x_hat), y) - alpha * L_feat(x, x_hat) for one sample.
LossBreakdown transformation_loss(const Tensor<float>& x, const Tensor<float>& x_hat,
                                  const OneHotLabel& y, const Classifier<float>& psi,
                                  const FeatureExtractor<float>& phi, double alpha);

/// Mean of transformation_loss over the batch with x_hat = h(x), all
/// networks in eval mode.
double batch_objective(const ImageBatch& x, std::span<const OneHotLabel> y,
                       const TransformNet<float>& h, const Classifier<float>& psi,
                       const FeatureExtractor<float>& phi, double alpha);

// ------------------------------------------------------ gradient engine

struct ObjectiveOptions {
  Mode h_mode = Mode::Eval;
  Mode psi_mode = Mode::Eval;
  bool backprop = false;   // accumulate dL/dtheta into h's parameter grads
  bool psi_grads = false;  // also accumulate dL/dpsi (requires backprop)
};

struct ObjectiveResult {
  double total = 0.0, class_term = 0.0, feat_term = 0.0;  // batch means
  std::vector<double> sample_class, sample_feat;
  std::vector<int> predictions;  // argmax, ties to the lowest index
};

/// Evaluates the batch objective (mean over the batch of class - alpha*feat)
/// with the cross-entropy computed from log-softmax logits. With
/// `opt.backprop` set, gradients of that mean are added to the parameter
/// grads of h (and of psi when `opt.psi_grads`); phi's source network never
/// receives gradients. Running statistics are not updated here: commit the
/// returned tapes for that.
template <typename T>
struct ObjectiveTapes {
  typename TransformNet<T>::Tape h;
  typename Classifier<T>::Tape psi;
};

template <typename T>
ObjectiveResult evaluate_objective(const Tensor<T>& x, std::span<const int> labels,
                                   TransformNet<T>& h, Classifier<T>& psi,
                                   const FeatureExtractor<T>& phi, double alpha,
                                   const ObjectiveOptions& opt, ObjectiveTapes<T>* tapes = nullptr);

}  // namespace protnet
