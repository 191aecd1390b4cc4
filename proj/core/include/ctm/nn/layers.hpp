#pragma once

// Forward/backward operators for the two fixed network architectures.
//
// Every layer caches what its backward pass needs during forward(); calling
// backward() without a cached forward raises StateError. Layers are
// templated on the scalar so gradient checks can run in double precision.

#include <string>
#include <vector>

#include "ctm/nn/tensor.hpp"
#include "ctm/rng.hpp"

namespace ctm::nn {

/// 3x3x3 kernel, stride 1, zero "same" padding. Weight shape (n=out, c=in, 3, 3, 3).
template <class T>
struct Conv3dParams {
  DiffTensor<T> weight;
  DiffTensor<T> bias;  // shape (c=out)

  Conv3dParams() = default;
  Conv3dParams(int in_channels, int out_channels);
  int in_channels() const { return weight.shape().c; }
  int out_channels() const { return weight.shape().n; }
  /// He-normal weights, zero bias.
  void init_he(Rng& rng);
};

/// Cross-correlation (no kernel flip).
template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Conv3dParams<T>& params);

/// Accumulates weight and bias gradients into `params`; returns the input gradient.
template <class T>
Tensor<T> conv3d_backward(const Tensor<T>& input, Conv3dParams<T>& params,
                          const Tensor<T>& grad_out);

template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in_channels, int out_channels) : params_(in_channels, out_channels) {}

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

  Conv3dParams<T>& params() { return params_; }
  const Conv3dParams<T>& params() const { return params_; }
  void init(Rng& rng) { params_.init_he(rng); }
  void collect(ParamSet<T>& set, const std::string& prefix);

 private:
  Conv3dParams<T> params_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// 1x1x1 convolution; weight shape (n=out, c=in).
template <class T>
class PointwiseConv {
 public:
  PointwiseConv() = default;
  PointwiseConv(int in_channels, int out_channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

  DiffTensor<T>& weight() { return weight_; }
  DiffTensor<T>& bias() { return bias_; }
  void init(Rng& rng);
  void collect(ParamSet<T>& set, const std::string& prefix);

 private:
  DiffTensor<T> weight_;
  DiffTensor<T> bias_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// Fully connected layer over the flattened (c, x, y, z) features of each batch item.
/// Output shape (n, c=out).
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

  DiffTensor<T>& weight() { return weight_; }
  DiffTensor<T>& bias() { return bias_; }
  int in_features() const { return weight_.shape().c; }
  int out_features() const { return weight_.shape().n; }
  void init(Rng& rng);
  void collect(ParamSet<T>& set, const std::string& prefix);

 private:
  DiffTensor<T> weight_;  // (n=out, c=in)
  DiffTensor<T> bias_;
  Tensor<T> input_;
  bool cached_ = false;
};

/// Per-channel batch normalization, eps 1e-5. Train mode uses batch statistics
/// and updates running stats as running = momentum * running + (1 - momentum) * batch.
template <class T>
class BatchNorm3d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

  BatchNorm3d() = default;
  explicit BatchNorm3d(int channels);

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

  DiffTensor<T>& gamma() { return gamma_; }
  DiffTensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }
  void collect(ParamSet<T>& set, const std::string& prefix);

 private:
  DiffTensor<T> gamma_;
  DiffTensor<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  Mode cached_mode_ = Mode::Train;
  bool cached_ = false;
};

template <class T>
class ReLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  std::vector<unsigned char> active_;
  Shape shape_;
  bool cached_ = false;
};

/// 2x2x2 max pooling with stride 2; every spatial dim must be even.
template <class T>
class MaxPool3d {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  std::vector<std::size_t> argmax_;
  Shape in_shape_;
  bool cached_ = false;
};

/// x2 trilinear upsampling, half-pixel centers, clamp at borders.
template <class T>
class Upsample2x {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  Tensor<T> backward(const Tensor<T>& grad_out);

 private:
  Shape in_shape_;
  bool cached_ = false;
};

/// Inverted dropout: kept activations are scaled by 1 / (1 - rate). Eval mode is the identity.
template <class T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate);

  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng& rng);
  Tensor<T> backward(const Tensor<T>& grad_out);
  double rate() const { return rate_; }

 private:
  double rate_ = 0.0;
  std::vector<T> scale_;
  bool identity_ = true;
  bool cached_ = false;
};

template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);

/// Inverse of concat_channels for gradients.
template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& whole, const std::vector<int>& channels);

template <class T>
Tensor<T> upsample2x_forward(const Tensor<T>& x);
template <class T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out, const Shape& in_shape);

/// Element-wise a += b (shapes must match).
template <class T>
void accumulate(Tensor<T>& a, const Tensor<T>& b);

}  // namespace ctm::nn
