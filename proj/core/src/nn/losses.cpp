#include "ctm/nn/losses.hpp"

#include <algorithm>
#include <limits>

namespace ctm::nn {

template <class T>
Tensor<T> log_softmax_channels(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  const std::size_t V = s.spatial();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < V; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits.channel(n, c)[i]));
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) sum += std::exp(logits.channel(n, c)[i] - mx);
      const double lse = mx + std::log(sum);
      for (int c = 0; c < s.c; ++c) out.channel(n, c)[i] = static_cast<T>(logits.channel(n, c)[i] - lse);
    }
  }
  return out;
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const Shape& s = logits.shape();
  const std::size_t V = s.spatial();
  Tensor<T> out(s);
  std::vector<double> e(static_cast<std::size_t>(s.c));
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < V; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits.channel(n, c)[i]));
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) {
        e[c] = std::exp(logits.channel(n, c)[i] - mx);
        sum += e[c];
      }
      for (int c = 0; c < s.c; ++c) out.channel(n, c)[i] = static_cast<T>(e[c] / sum);
    }
  }
  return out;
}

template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  const Shape& s = probs.shape();
  if (grad_probs.shape() != s) throw ShapeError("softmax backward: shape mismatch");
  const std::size_t V = s.spatial();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < V; ++i) {
      double dot = 0.0;
      for (int c = 0; c < s.c; ++c) {
        dot += static_cast<double>(probs.channel(n, c)[i]) * grad_probs.channel(n, c)[i];
      }
      for (int c = 0; c < s.c; ++c) {
        out.channel(n, c)[i] =
            static_cast<T>(probs.channel(n, c)[i] * (grad_probs.channel(n, c)[i] - dot));
      }
    }
  }
  return out;
}

template Tensor<float> softmax_channels<float>(const Tensor<float>&);
template Tensor<double> softmax_channels<double>(const Tensor<double>&);
template Tensor<float> log_softmax_channels<float>(const Tensor<float>&);
template Tensor<double> log_softmax_channels<double>(const Tensor<double>&);
template Tensor<float> softmax_backward<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> softmax_backward<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace ctm::nn
