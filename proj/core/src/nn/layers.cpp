#include "ctm/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace ctm::nn {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(x) + "," +
         std::to_string(y) + "," + std::to_string(z) + ")";
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Direct correlation kernels. Each call handles one batch item on an input
// zero-padded by one voxel on every side; weights are laid out as
// [ci][tap][co] so a block of output channels reads contiguous values.

template <class T>
void pad_item(const T* in, const Shape& s, int channels, std::vector<T>& pad) {
  const std::size_t PX = s.x + 2, PY = s.y + 2, PZ = s.z + 2;
  pad.assign(channels * PX * PY * PZ, T{0});
  const std::size_t V = s.spatial();
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < s.z; ++z) {
      for (int y = 0; y < s.y; ++y) {
        const T* src = in + c * V + (static_cast<std::size_t>(z) * s.y + y) * s.x;
        T* dst = pad.data() + ((c * PZ + z + 1) * PY + y + 1) * PX + 1;
        std::copy(src, src + s.x, dst);
      }
    }
  }
}

// One 64-byte SIMD vector (GCC/Clang vector extension).
typedef float VecF32x16 __attribute__((vector_size(64)));
typedef double VecF64x8 __attribute__((vector_size(64)));
template <class T>
struct Simd;
template <>
struct Simd<float> {
  using type = VecF32x16;
};
template <>
struct Simd<double> {
  using type = VecF64x8;
};

template <class T, int CB, int L>
void conv_tile(const T* pad, std::size_t plane, std::size_t PX, std::size_t PY, int cin,
               const T* wt, int cout, int co0, std::size_t base, T* out,
               std::size_t out_stride) {
  static_assert(L * sizeof(T) == 64);
  using V = typename Simd<T>::type;
  V acc[CB];
  for (int c = 0; c < CB; ++c) acc[c] = V{};
  for (int ci = 0; ci < cin; ++ci) {
    const T* p = pad + ci * plane + base;
    const T* w = wt + static_cast<std::size_t>(ci) * 27 * cout + co0;
    for (int kz = 0; kz < 3; ++kz) {
      for (int ky = 0; ky < 3; ++ky) {
        const T* row = p + (kz * PY + ky) * PX;
        for (int kx = 0; kx < 3; ++kx) {
          const T* wk = w + ((kz * 3 + ky) * 3 + kx) * cout;
          V src;
          std::memcpy(&src, row + kx, sizeof(V));
          for (int c = 0; c < CB; ++c) acc[c] += wk[c] * src;
        }
      }
    }
  }
  for (int c = 0; c < CB; ++c) {
    T* o = out + (co0 + c) * out_stride;
    for (int l = 0; l < L; ++l) o[l] += acc[c][l];
  }
}

// Partial tile at the end of a row.
template <class T>
void conv_tail(const T* pad, std::size_t plane, std::size_t PX, std::size_t PY, int cin,
               const T* wt, int cout, std::size_t base, int len, T* out, std::size_t out_stride) {
  for (int co = 0; co < cout; ++co) {
    T* o = out + co * out_stride;
    for (int l = 0; l < len; ++l) {
      T acc{0};
      for (int ci = 0; ci < cin; ++ci) {
        const T* p = pad + ci * plane + base + l;
        const T* w = wt + static_cast<std::size_t>(ci) * 27 * cout + co;
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) acc += w[((kz * 3 + ky) * 3 + kx) * cout] * p[(kz * PY + ky) * PX + kx];
      }
      o[l] += acc;
    }
  }
}

// out (cout x V) += correlation of the padded input with wt.
template <class T>
void direct_conv_item(const std::vector<T>& pad, const Shape& s, int cin, int cout,
                      const std::vector<T>& wt, T* out) {
  constexpr int L = 64 / sizeof(T);
  const std::size_t PX = s.x + 2, PY = s.y + 2, PZ = s.z + 2;
  const std::size_t plane = PX * PY * PZ;
  const std::size_t V = s.spatial();
  for (int z = 0; z < s.z; ++z) {
    for (int y = 0; y < s.y; ++y) {
      for (int x0 = 0; x0 < s.x; x0 += L) {
        const int len = std::min(L, s.x - x0);
        const std::size_t base = (static_cast<std::size_t>(z) * PY + y) * PX + x0;
        T* o = out + (static_cast<std::size_t>(z) * s.y + y) * s.x + x0;
        if (len < L) {
          conv_tail(pad.data(), plane, PX, PY, cin, wt.data(), cout, base, len, o, V);
          continue;
        }
        int co = 0;
        for (; co + 8 <= cout; co += 8)
          conv_tile<T, 8, L>(pad.data(), plane, PX, PY, cin, wt.data(), cout, co, base, o, V);
        for (; co + 4 <= cout; co += 4)
          conv_tile<T, 4, L>(pad.data(), plane, PX, PY, cin, wt.data(), cout, co, base, o, V);
        for (; co < cout; ++co)
          conv_tile<T, 1, L>(pad.data(), plane, PX, PY, cin, wt.data(), cout, co, base, o, V);
      }
    }
  }
}

template <class T>
void he_normal(Tensor<T>& w, int fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.normal() * sd);
}

template <class T>
void require_cache(bool cached, const char* layer) {
  if (!cached) throw StateError(std::string(layer) + ": backward called without a cached forward");
}

}  // namespace

// ---------------------------------------------------------------- conv3d

template <class T>
Conv3dParams<T>::Conv3dParams(int in_channels, int out_channels)
    : weight(Shape{out_channels, in_channels, 3, 3, 3}), bias(Shape{1, out_channels, 1, 1, 1}) {}

template <class T>
void Conv3dParams<T>::init_he(Rng& rng) {
  he_normal(weight.value(), in_channels() * 27, rng);
  bias.value().fill(T{0});
}

template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Conv3dParams<T>& params) {
  const Shape& s = input.shape();
  const int cin = params.in_channels();
  const int cout = params.out_channels();
  if (s.c != cin) {
    throw ShapeError("conv3d: input has " + std::to_string(s.c) + " channels, weights expect " +
                     std::to_string(cin));
  }
  const std::size_t V = s.spatial();
  Tensor<T> out(Shape{s.n, cout, s.x, s.y, s.z});
  // Weights (co, ci, tap) -> [ci][tap][co].
  const T* w = params.weight.value().data();
  std::vector<T> wt(static_cast<std::size_t>(cin) * 27 * cout);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int k = 0; k < 27; ++k) wt[(ci * 27 + k) * cout + co] = w[(co * cin + ci) * 27 + k];
  const T* b = params.bias.value().data();
  std::vector<T> pad;
  for (int n = 0; n < s.n; ++n) {
    T* o = out.channel(n, 0);
    for (int co = 0; co < cout; ++co) std::fill(o + co * V, o + (co + 1) * V, b[co]);
    pad_item(input.channel(n, 0), s, cin, pad);
    direct_conv_item(pad, s, cin, cout, wt, o);
  }
  return out;
}

template <class T>
Tensor<T> conv3d_backward(const Tensor<T>& input, Conv3dParams<T>& params,
                          const Tensor<T>& grad_out) {
  const Shape& s = input.shape();
  const int cin = params.in_channels();
  const int cout = params.out_channels();
  if (s.c != cin || grad_out.shape() != Shape{s.n, cout, s.x, s.y, s.z}) {
    throw ShapeError("conv3d backward: shape mismatch");
  }
  const std::size_t V = s.spatial();
  Tensor<T> grad_in(s);
  // Input gradient: correlate grad_out with the flipped kernel, channels swapped.
  // Weights (co, ci, tap) -> [co][26 - tap][ci].
  const T* w = params.weight.value().data();
  std::vector<T> wt(static_cast<std::size_t>(cin) * 27 * cout);
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int k = 0; k < 27; ++k) wt[(co * 27 + (26 - k)) * cin + ci] = w[(co * cin + ci) * 27 + k];

  // Weight gradient, one GEMM per tap over the padded grids. Border positions
  // of the padded grad_out are zero, so every in-range product is exact.
  const Eigen::Index PX = s.x + 2, PY = s.y + 2, PZ = s.z + 2;
  const Eigen::Index plane = PX * PY * PZ;
  const Eigen::Index lo = PX * PY + PX + 1;
  const Eigen::Index len = plane - 2 * lo;
  RowMat<T> tap(cout, cin);
  T* gw = params.weight.grad().data();
  std::vector<double> bias_sum(cout, 0.0);
  std::vector<T> pad_x;
  std::vector<T> pad_g;
  for (int n = 0; n < s.n; ++n) {
    pad_item(input.channel(n, 0), s, cin, pad_x);
    pad_item(grad_out.channel(n, 0), s, cout, pad_g);
    ConstMatMap<T> G(pad_g.data() + lo, cout, len, Eigen::OuterStride<>(plane));
    for (int k = 0; k < 27; ++k) {
      const int kz = k / 9, ky = (k / 3) % 3, kx = k % 3;
      const Eigen::Index shift = (kz - 1) * PX * PY + (ky - 1) * PX + (kx - 1);
      ConstMatMap<T> X(pad_x.data() + lo + shift, cin, len, Eigen::OuterStride<>(plane));
      tap.noalias() = G * X.transpose();
      for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci) gw[(co * cin + ci) * 27 + k] += tap(co, ci);
    }
    for (int co = 0; co < cout; ++co) {
      const T* g = grad_out.channel(n, co);
      double acc = 0.0;
      for (std::size_t i = 0; i < V; ++i) acc += g[i];
      bias_sum[co] += acc;
    }
    direct_conv_item(pad_g, s, cout, cin, wt, grad_in.channel(n, 0));
  }
  T* gb = params.bias.grad().data();
  for (int co = 0; co < cout; ++co) gb[co] += static_cast<T>(bias_sum[co]);
  return grad_in;
}

template <class T>
Tensor<T> Conv3d<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> out = conv3d_forward(x, params_);
  if (mode == Mode::Train) {
    input_ = x;
    cached_ = true;
  } else {
    cached_ = false;
  }
  return out;
}

template <class T>
Tensor<T> Conv3d<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "conv3d");
  return conv3d_backward(input_, params_, grad_out);
}

template <class T>
void Conv3d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.add(prefix + ".weight", params_.weight);
  set.add(prefix + ".bias", params_.bias);
}

// ---------------------------------------------------------------- pointwise

template <class T>
PointwiseConv<T>::PointwiseConv(int in_channels, int out_channels)
    : weight_(Shape{out_channels, in_channels, 1, 1, 1}), bias_(Shape{1, out_channels, 1, 1, 1}) {}

template <class T>
void PointwiseConv<T>::init(Rng& rng) {
  he_normal(weight_.value(), weight_.shape().c, rng);
  bias_.value().fill(T{0});
}

template <class T>
Tensor<T> PointwiseConv<T>::forward(const Tensor<T>& x, Mode mode) {
  const int cin = weight_.shape().c;
  const int cout = weight_.shape().n;
  const Shape& s = x.shape();
  if (s.c != cin) throw ShapeError("pointwise conv: channel mismatch");
  const auto V = static_cast<Eigen::Index>(s.spatial());
  Tensor<T> out(Shape{s.n, cout, s.x, s.y, s.z});
  ConstMatMap<T> W(weight_.value().data(), cout, cin, Eigen::OuterStride<>(cin));
  for (int n = 0; n < s.n; ++n) {
    ConstMatMap<T> I(x.channel(n, 0), cin, V, Eigen::OuterStride<>(V));
    MatMap<T> O(out.channel(n, 0), cout, V, Eigen::OuterStride<>(V));
    O.noalias() = W * I;
    for (int co = 0; co < cout; ++co) O.row(co).array() += bias_.value()[co];
  }
  if (mode == Mode::Train) {
    input_ = x;
    cached_ = true;
  } else {
    cached_ = false;
  }
  return out;
}

template <class T>
Tensor<T> PointwiseConv<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "pointwise conv");
  const int cin = weight_.shape().c;
  const int cout = weight_.shape().n;
  const Shape& s = input_.shape();
  const auto V = static_cast<Eigen::Index>(s.spatial());
  Tensor<T> grad_in(s);
  ConstMatMap<T> W(weight_.value().data(), cout, cin, Eigen::OuterStride<>(cin));
  MatMap<T> GW(weight_.grad().data(), cout, cin, Eigen::OuterStride<>(cin));
  std::vector<double> bias_sum(cout, 0.0);
  for (int n = 0; n < s.n; ++n) {
    ConstMatMap<T> I(input_.channel(n, 0), cin, V, Eigen::OuterStride<>(V));
    ConstMatMap<T> G(grad_out.channel(n, 0), cout, V, Eigen::OuterStride<>(V));
    MatMap<T> GI(grad_in.channel(n, 0), cin, V, Eigen::OuterStride<>(V));
    GW.noalias() += G * I.transpose();
    GI.noalias() = W.transpose() * G;
    for (int co = 0; co < cout; ++co) {
      const T* g = grad_out.channel(n, co);
      double acc = 0.0;
      for (Eigen::Index p = 0; p < V; ++p) acc += g[p];
      bias_sum[co] += acc;
    }
  }
  T* gb = bias_.grad().data();
  for (int co = 0; co < cout; ++co) gb[co] += static_cast<T>(bias_sum[co]);
  return grad_in;
}

template <class T>
void PointwiseConv<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.add(prefix + ".weight", weight_);
  set.add(prefix + ".bias", bias_);
}

// ---------------------------------------------------------------- linear

template <class T>
Linear<T>::Linear(int in_features, int out_features)
    : weight_(Shape{out_features, in_features, 1, 1, 1}), bias_(Shape{1, out_features, 1, 1, 1}) {}

template <class T>
void Linear<T>::init(Rng& rng) {
  he_normal(weight_.value(), in_features(), rng);
  bias_.value().fill(T{0});
}

template <class T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode mode) {
  const int F = in_features();
  const int H = out_features();
  const int N = x.shape().n;
  if (x.size() != static_cast<std::size_t>(N) * F) {
    throw ShapeError("linear: expected " + std::to_string(F) + " features per item, got shape " +
                     x.shape().str());
  }
  Tensor<T> out(Shape{N, H, 1, 1, 1});
  ConstMatMap<T> I(x.data(), N, F, Eigen::OuterStride<>(F));
  ConstMatMap<T> W(weight_.value().data(), H, F, Eigen::OuterStride<>(F));
  MatMap<T> O(out.data(), N, H, Eigen::OuterStride<>(H));
  O.noalias() = I * W.transpose();
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < H; ++h) O(n, h) += bias_.value()[h];
  }
  if (mode == Mode::Train) {
    input_ = x;
    cached_ = true;
  } else {
    cached_ = false;
  }
  return out;
}

template <class T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "linear");
  const int F = in_features();
  const int H = out_features();
  const int N = input_.shape().n;
  if (grad_out.size() != static_cast<std::size_t>(N) * H) {
    throw ShapeError("linear backward: gradient shape mismatch");
  }
  Tensor<T> grad_in(input_.shape());
  ConstMatMap<T> I(input_.data(), N, F, Eigen::OuterStride<>(F));
  ConstMatMap<T> W(weight_.value().data(), H, F, Eigen::OuterStride<>(F));
  ConstMatMap<T> G(grad_out.data(), N, H, Eigen::OuterStride<>(H));
  MatMap<T> GW(weight_.grad().data(), H, F, Eigen::OuterStride<>(F));
  MatMap<T> GI(grad_in.data(), N, F, Eigen::OuterStride<>(F));
  GW.noalias() += G.transpose() * I;
  GI.noalias() = G * W;
  T* gb = bias_.grad().data();
  for (int h = 0; h < H; ++h) {
    double acc = 0.0;
    for (int n = 0; n < N; ++n) acc += G(n, h);
    gb[h] += static_cast<T>(acc);
  }
  return grad_in;
}

template <class T>
void Linear<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.add(prefix + ".weight", weight_);
  set.add(prefix + ".bias", bias_);
}

// ---------------------------------------------------------------- batchnorm

template <class T>
BatchNorm3d<T>::BatchNorm3d(int channels)
    : gamma_(Shape{1, channels, 1, 1, 1}, T{1}),
      beta_(Shape{1, channels, 1, 1, 1}, T{0}),
      running_mean_(Shape{1, channels, 1, 1, 1}, T{0}),
      running_var_(Shape{1, channels, 1, 1, 1}, T{1}) {}

template <class T>
Tensor<T> BatchNorm3d<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& s = x.shape();
  const int C = gamma_.shape().c;
  if (s.c != C) throw ShapeError("batchnorm: channel mismatch");
  const std::size_t V = s.spatial();
  const double M = static_cast<double>(V) * s.n;
  Tensor<T> out(s);
  xhat_ = Tensor<T>(s);
  inv_std_.assign(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double mean;
    double var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.channel(n, c);
        for (std::size_t i = 0; i < V; ++i) sum += p[i];
      }
      mean = sum / M;
      double ss = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.channel(n, c);
        for (std::size_t i = 0; i < V; ++i) {
          const double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / M;
      running_mean_[c] = static_cast<T>(kMomentum * running_mean_[c] + (1.0 - kMomentum) * mean);
      running_var_[c] = static_cast<T>(kMomentum * running_var_[c] + (1.0 - kMomentum) * var);
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    const double g = gamma_.value()[c];
    const double b = beta_.value()[c];
    for (int n = 0; n < s.n; ++n) {
      const T* p = x.channel(n, c);
      T* xh = xhat_.channel(n, c);
      T* o = out.channel(n, c);
      for (std::size_t i = 0; i < V; ++i) {
        const double h = (p[i] - mean) * inv;
        xh[i] = static_cast<T>(h);
        o[i] = static_cast<T>(g * h + b);
      }
    }
  }
  cached_mode_ = mode;
  cached_ = true;
  return out;
}

template <class T>
Tensor<T> BatchNorm3d<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "batchnorm");
  const Shape& s = xhat_.shape();
  if (grad_out.shape() != s) throw ShapeError("batchnorm backward: shape mismatch");
  const int C = s.c;
  const std::size_t V = s.spatial();
  const double M = static_cast<double>(V) * s.n;
  Tensor<T> grad_in(s);
  for (int c = 0; c < C; ++c) {
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const T* g = grad_out.channel(n, c);
      const T* xh = xhat_.channel(n, c);
      for (std::size_t i = 0; i < V; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
    }
    gamma_.grad()[c] += static_cast<T>(sum_gx);
    beta_.grad()[c] += static_cast<T>(sum_g);
    const double gam = gamma_.value()[c];
    const double inv = inv_std_[c];
    for (int n = 0; n < s.n; ++n) {
      const T* g = grad_out.channel(n, c);
      const T* xh = xhat_.channel(n, c);
      T* gi = grad_in.channel(n, c);
      if (cached_mode_ == Mode::Train) {
        const double k = gam * inv / M;
        for (std::size_t i = 0; i < V; ++i) {
          gi[i] = static_cast<T>(k * (M * g[i] - sum_g - xh[i] * sum_gx));
        }
      } else {
        for (std::size_t i = 0; i < V; ++i) gi[i] = static_cast<T>(gam * inv * g[i]);
      }
    }
  }
  return grad_in;
}

template <class T>
void BatchNorm3d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.add(prefix + ".gamma", gamma_);
  set.add(prefix + ".beta", beta_);
  set.add_buffer(prefix + ".running_mean", running_mean_);
  set.add_buffer(prefix + ".running_var", running_var_);
}

// ---------------------------------------------------------------- relu

template <class T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> out(x.shape());
  const bool keep = mode == Mode::Train;
  if (keep) active_.assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool on = x[i] > T{0};
    out[i] = on ? x[i] : T{0};
    if (keep) active_[i] = on;
  }
  shape_ = x.shape();
  cached_ = keep;
  return out;
}

template <class T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "relu");
  if (grad_out.shape() != shape_) throw ShapeError("relu backward: shape mismatch");
  Tensor<T> grad_in(shape_);
  for (std::size_t i = 0; i < grad_out.size(); ++i) grad_in[i] = active_[i] ? grad_out[i] : T{0};
  return grad_in;
}

// ---------------------------------------------------------------- maxpool

template <class T>
Tensor<T> MaxPool3d<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& s = x.shape();
  if (s.x % 2 != 0 || s.y % 2 != 0 || s.z % 2 != 0) {
    throw ShapeError("maxpool3d: spatial dims must be even, got " + s.str());
  }
  const Shape o{s.n, s.c, s.x / 2, s.y / 2, s.z / 2};
  Tensor<T> out(o);
  const bool keep = mode == Mode::Train;
  if (keep) argmax_.assign(out.size(), 0);
  std::size_t oi = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int z = 0; z < o.z; ++z) {
        for (int y = 0; y < o.y; ++y) {
          for (int xo = 0; xo < o.x; ++xo, ++oi) {
            std::size_t best = x.index(n, c, 2 * xo, 2 * y, 2 * z);
            T best_v = x[best];
            for (int dz = 0; dz < 2; ++dz) {
              for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                  const std::size_t i = x.index(n, c, 2 * xo + dx, 2 * y + dy, 2 * z + dz);
                  if (x[i] > best_v) {
                    best_v = x[i];
                    best = i;
                  }
                }
              }
            }
            out[oi] = best_v;
            if (keep) argmax_[oi] = best;
          }
        }
      }
    }
  }
  in_shape_ = s;
  cached_ = keep;
  return out;
}

template <class T>
Tensor<T> MaxPool3d<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "maxpool3d");
  if (grad_out.size() != argmax_.size()) throw ShapeError("maxpool3d backward: shape mismatch");
  Tensor<T> grad_in(in_shape_);
  for (std::size_t i = 0; i < argmax_.size(); ++i) grad_in[argmax_[i]] += grad_out[i];
  return grad_in;
}

// ---------------------------------------------------------------- upsample

namespace {

struct Tap {
  int i0;
  int i1;
  double f;
};

std::vector<Tap> upsample_taps(int len) {
  std::vector<Tap> taps(2 * static_cast<std::size_t>(len));
  for (int o = 0; o < 2 * len; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(len - 1));
    const int i0 = static_cast<int>(std::floor(src));
    taps[o] = {i0, std::min(i0 + 1, len - 1), src - i0};
  }
  return taps;
}

// View a tensor as [outer][len][inner] along one spatial axis.
struct AxisView {
  std::size_t outer;
  int len;
  std::size_t inner;
};

AxisView axis_view(const Shape& s, int axis) {
  const std::size_t nc = static_cast<std::size_t>(s.n) * s.c;
  if (axis == 0) return {nc * s.z * s.y, s.x, 1};
  if (axis == 1) return {nc * s.z, s.y, static_cast<std::size_t>(s.x)};
  return {nc, s.z, static_cast<std::size_t>(s.x) * s.y};
}

Shape doubled(const Shape& s, int axis) {
  Shape o = s;
  if (axis == 0) o.x *= 2;
  if (axis == 1) o.y *= 2;
  if (axis == 2) o.z *= 2;
  return o;
}

template <class T>
Tensor<T> upsample_axis(const Tensor<T>& in, int axis) {
  const AxisView v = axis_view(in.shape(), axis);
  const auto taps = upsample_taps(v.len);
  Tensor<T> out(doubled(in.shape(), axis));
  const std::size_t out_len = 2 * static_cast<std::size_t>(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* src = in.data() + o * v.len * v.inner;
    T* dst = out.data() + o * out_len * v.inner;
    for (std::size_t k = 0; k < out_len; ++k) {
      const Tap& t = taps[k];
      const T* a = src + t.i0 * v.inner;
      const T* b = src + t.i1 * v.inner;
      T* d = dst + k * v.inner;
      const T wa = static_cast<T>(1.0 - t.f);
      const T wb = static_cast<T>(t.f);
      for (std::size_t i = 0; i < v.inner; ++i) d[i] = wa * a[i] + wb * b[i];
    }
  }
  return out;
}

template <class T>
Tensor<T> upsample_axis_transpose(const Tensor<T>& grad, int axis, const Shape& in_shape) {
  const AxisView v = axis_view(in_shape, axis);
  const auto taps = upsample_taps(v.len);
  Tensor<T> out(in_shape);
  const std::size_t out_len = 2 * static_cast<std::size_t>(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* g = grad.data() + o * out_len * v.inner;
    T* dst = out.data() + o * v.len * v.inner;
    for (std::size_t k = 0; k < out_len; ++k) {
      const Tap& t = taps[k];
      T* a = dst + t.i0 * v.inner;
      T* b = dst + t.i1 * v.inner;
      const T* gk = g + k * v.inner;
      const T wa = static_cast<T>(1.0 - t.f);
      const T wb = static_cast<T>(t.f);
      for (std::size_t i = 0; i < v.inner; ++i) {
        a[i] += wa * gk[i];
        b[i] += wb * gk[i];
      }
    }
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> upsample2x_forward(const Tensor<T>& x) {
  return upsample_axis(upsample_axis(upsample_axis(x, 0), 1), 2);
}

template <class T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out, const Shape& in_shape) {
  const Shape sx = doubled(in_shape, 0);
  const Shape sxy = doubled(sx, 1);
  if (grad_out.shape() != doubled(sxy, 2)) throw ShapeError("upsample backward: shape mismatch");
  Tensor<T> g = upsample_axis_transpose(grad_out, 2, sxy);
  g = upsample_axis_transpose(g, 1, sx);
  return upsample_axis_transpose(g, 0, in_shape);
}

template <class T>
Tensor<T> Upsample2x<T>::forward(const Tensor<T>& x, Mode mode) {
  in_shape_ = x.shape();
  cached_ = mode == Mode::Train;
  return upsample2x_forward(x);
}

template <class T>
Tensor<T> Upsample2x<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "upsample");
  return upsample2x_backward(grad_out, in_shape_);
}

// ---------------------------------------------------------------- dropout

template <class T>
Dropout<T>::Dropout(double rate) : rate_(rate) {
  if (rate < 0.0 || rate >= 1.0) throw ParameterError("dropout rate must be in [0, 1)");
}

template <class T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  cached_ = true;
  if (mode == Mode::Eval || rate_ == 0.0) {
    identity_ = true;
    return x;
  }
  identity_ = false;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
  scale_.resize(x.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    scale_[i] = rng.uniform() >= rate_ ? keep_scale : T{0};
    out[i] = x[i] * scale_[i];
  }
  return out;
}

template <class T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) {
  require_cache<T>(cached_, "dropout");
  if (identity_) return grad_out;
  Tensor<T> grad_in(grad_out.shape());
  for (std::size_t i = 0; i < grad_out.size(); ++i) grad_in[i] = grad_out[i] * scale_[i];
  return grad_in;
}

// ---------------------------------------------------------------- concat

template <class T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts.front()->shape();
  int channels = 0;
  for (const Tensor<T>* p : parts) {
    if (p->shape().n != s.n || !p->shape().same_spatial(s)) {
      throw ShapeError("concat_channels: mismatched shapes " + p->shape().str() + " vs " + s.str());
    }
    channels += p->shape().c;
  }
  s.c = channels;
  Tensor<T> out(s);
  const std::size_t V = s.spatial();
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const Tensor<T>* p : parts) {
      const std::size_t block = static_cast<std::size_t>(p->shape().c) * V;
      std::copy(p->channel(n, 0), p->channel(n, 0) + block, out.channel(n, c0));
      c0 += p->shape().c;
    }
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& whole, const std::vector<int>& channels) {
  const Shape& s = whole.shape();
  int total = 0;
  for (int c : channels) total += c;
  if (total != s.c) throw ShapeError("split_channels: channel counts do not sum to tensor channels");
  std::vector<Tensor<T>> out;
  out.reserve(channels.size());
  const std::size_t V = s.spatial();
  int c0 = 0;
  for (int c : channels) {
    Tensor<T> part(Shape{s.n, c, s.x, s.y, s.z});
    for (int n = 0; n < s.n; ++n) {
      std::copy(whole.channel(n, c0), whole.channel(n, c0) + c * V, part.channel(n, 0));
    }
    out.push_back(std::move(part));
    c0 += c;
  }
  return out;
}

template <class T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("accumulate: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

#define CTM_INSTANTIATE_LAYERS(T)                                                               \
  template struct Conv3dParams<T>;                                                              \
  template Tensor<T> conv3d_forward<T>(const Tensor<T>&, const Conv3dParams<T>&);               \
  template Tensor<T> conv3d_backward<T>(const Tensor<T>&, Conv3dParams<T>&, const Tensor<T>&); \
  template class Conv3d<T>;                                                                     \
  template class PointwiseConv<T>;                                                              \
  template class Linear<T>;                                                                     \
  template class BatchNorm3d<T>;                                                                \
  template class ReLU<T>;                                                                       \
  template class MaxPool3d<T>;                                                                  \
  template class Upsample2x<T>;                                                                 \
  template class Dropout<T>;                                                                    \
  template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&);                  \
  template std::vector<Tensor<T>> split_channels<T>(const Tensor<T>&, const std::vector<int>&); \
  template Tensor<T> upsample2x_forward<T>(const Tensor<T>&);                                   \
  template Tensor<T> upsample2x_backward<T>(const Tensor<T>&, const Shape&);                    \
  template void accumulate<T>(Tensor<T>&, const Tensor<T>&);

CTM_INSTANTIATE_LAYERS(float)
CTM_INSTANTIATE_LAYERS(double)

#undef CTM_INSTANTIATE_LAYERS

}  // namespace ctm::nn
