#pragma once

// Elementwise activations and scalar loss pieces shared by both networks.

#include <cmath>

#include "ctm/nn/tensor.hpp"

namespace ctm::nn {

/// Softmax over the channel axis at every (n, voxel).
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

/// Log-softmax over the channel axis, computed with the max-shift trick.
template <class T>
Tensor<T> log_softmax_channels(const Tensor<T>& logits);

/// Gradient w.r.t. logits given softmax output p and dL/dp:
/// g_l = p * (g_p - sum_c p_c g_p,c).
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs);

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Binary cross-entropy on a logit; derivative is sigmoid(x) - target.
inline double bce_with_logits(double x, double target) {
  return std::max(x, 0.0) - x * target + std::log1p(std::exp(-std::abs(x)));
}
inline double bce_with_logits_grad(double x, double target) { return sigmoid(x) - target; }

inline double smooth_l1(double d, double beta = 1.0) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}
inline double smooth_l1_grad(double d, double beta = 1.0) {
  if (std::abs(d) < beta) return d / beta;
  return d > 0.0 ? 1.0 : -1.0;
}

}  // namespace ctm::nn
