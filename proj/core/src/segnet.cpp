#include "ctm/segnet.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <thread>

#include "ctm/nn/checkpoint.hpp"
#include "ctm/nn/losses.hpp"

namespace ctm::seg {

using nn::Mode;
using nn::Shape;
using nn::Tensor;

// ---------------------------------------------------------------- config

void SegNetConfig::validate() const {
  if (depth < 2) throw ConfigError("segnet depth must be >= 2");
  if (base_channels < 1) throw ConfigError("segnet base_channels must be >= 1");
  if (max_channels < base_channels || max_channels > 256) {
    throw ConfigError("segnet max_channels must lie in [base_channels, 256]");
  }
  if (num_classes != kNumClasses) throw ConfigError("segnet num_classes must be 6");
  if (w_dice < 0.0 || w_ce < 0.0 || std::abs(w_dice + w_ce - 1.0) > 1e-12) {
    throw ConfigError("segnet loss weights must be non-negative and sum to 1");
  }
}

int SegNetConfig::channels(int level) const {
  return std::min(base_channels << level, max_channels);
}

nlohmann::json SegNetConfig::to_json() const {
  return {{"depth", depth},
          {"base_channels", base_channels},
          {"max_channels", max_channels},
          {"num_classes", num_classes},
          {"deep_supervision", deep_supervision},
          {"w_dice", w_dice},
          {"w_ce", w_ce}};
}

SegNetConfig SegNetConfig::from_json(const nlohmann::json& j) {
  SegNetConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "depth") c.depth = value.get<int>();
      else if (key == "base_channels") c.base_channels = value.get<int>();
      else if (key == "max_channels") c.max_channels = value.get<int>();
      else if (key == "num_classes") c.num_classes = value.get<int>();
      else if (key == "deep_supervision") c.deep_supervision = value.get<bool>();
      else if (key == "w_dice") c.w_dice = value.get<double>();
      else if (key == "w_ce") c.w_ce = value.get<double>();
      else throw ConfigError("unknown segnet key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed segnet config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

Dims dims_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-element dims array");
  return Dims(j[0].get<int>(), j[1].get<int>(), j[2].get<int>());
}

nlohmann::json dims_to_json(const Dims& d) { return {d.nx, d.ny, d.nz}; }

void check_patch(const SegNetConfig& cfg, const Dims& patch, const char* what) {
  const int m = 1 << cfg.depth;
  for (int a = 0; a < 3; ++a) {
    if (patch[a] % m != 0) {
      throw ConfigError(std::string(what) + " dims must be divisible by 2^depth = " +
                        std::to_string(m));
    }
  }
}

}  // namespace

void SegTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("segmentation epochs must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("segmentation steps_per_epoch must be >= 1");
  if (batch_size < 1) throw ConfigError("segmentation batch_size must be >= 1");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0, 1)");
  if (foreground_fraction < 0.0 || foreground_fraction > 1.0) {
    throw ConfigError("foreground_fraction must be in [0, 1]");
  }
  adam.validate();
  try {
    nn::validate(effective_schedule());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

nn::LrSchedule SegTrainConfig::effective_schedule() const {
  if (schedule) return *schedule;
  return nn::CosineAnnealing{0.01, static_cast<double>(epochs), 0.0};
}

nlohmann::json SegTrainConfig::to_json() const {
  nlohmann::json j = {{"epochs", epochs},
                      {"steps_per_epoch", steps_per_epoch},
                      {"batch_size", batch_size},
                      {"train_patch", dims_to_json(train_patch)},
                      {"infer_patch", dims_to_json(infer_patch.patch)},
                      {"infer_stride", dims_to_json(infer_patch.stride)},
                      {"val_fraction", val_fraction},
                      {"foreground_fraction", foreground_fraction},
                      {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}}};
  if (schedule) j["schedule"] = nn::schedule_to_json(*schedule);
  return j;
}

SegTrainConfig SegTrainConfig::from_json(const nlohmann::json& j) {
  SegTrainConfig c;
  try {
    Dims ip = c.infer_patch.patch;
    Dims is = c.infer_patch.stride;
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "train_patch") c.train_patch = dims_from_json(value);
      else if (key == "infer_patch") ip = dims_from_json(value);
      else if (key == "infer_stride") is = dims_from_json(value);
      else if (key == "val_fraction") c.val_fraction = value.get<double>();
      else if (key == "foreground_fraction") c.foreground_fraction = value.get<double>();
      else if (key == "schedule") c.schedule = nn::schedule_from_json(value);
      else if (key == "adam") {
        for (const auto& [ak, av] : value.items()) {
          if (ak == "beta1") c.adam.beta1 = av.get<double>();
          else if (ak == "beta2") c.adam.beta2 = av.get<double>();
          else if (ak == "eps") c.adam.eps = av.get<double>();
          else throw ConfigError("unknown adam key '" + ak + "'");
        }
      } else {
        throw ConfigError("unknown segmentation training key '" + key + "'");
      }
    }
    c.infer_patch = prep::PatchSpec(ip, is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed segmentation training config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- network

template <class T>
ConvBlock<T>::ConvBlock(int in_channels, int out_channels)
    : conv1_(in_channels, out_channels),
      bn1_(out_channels),
      conv2_(out_channels, out_channels),
      bn2_(out_channels) {}

template <class T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
  return relu2_.forward(bn2_.forward(conv2_.forward(h, mode), mode), mode);
}

template <class T>
Tensor<T> ConvBlock<T>::backward(const Tensor<T>& g) {
  Tensor<T> h = conv2_.backward(bn2_.backward(relu2_.backward(g)));
  return conv1_.backward(bn1_.backward(relu1_.backward(h)));
}

template <class T>
void ConvBlock<T>::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
}

template <class T>
void ConvBlock<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  conv1_.collect(set, prefix + ".conv1");
  bn1_.collect(set, prefix + ".bn1");
  conv2_.collect(set, prefix + ".conv2");
  bn2_.collect(set, prefix + ".bn2");
}

template <class T>
int UNetPP<T>::node_index(int i, int j) const {
  // Column-major enumeration; column j holds depth - j nodes.
  int idx = 0;
  for (int jj = 0; jj < j; ++jj) idx += cfg_.depth - jj;
  return idx + i;
}

template <class T>
UNetPP<T>::UNetPP(const SegNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.depth;
  for (int j = 0; j < D; ++j) {
    for (int i = 0; i + j < D; ++i) {
      int in_ch;
      if (j == 0) {
        in_ch = i == 0 ? 1 : cfg_.channels(i - 1);
      } else {
        in_ch = j * cfg_.channels(i) + cfg_.channels(i + 1);
      }
      blocks_.emplace_back(in_ch, cfg_.channels(i));
    }
  }
  pools_.resize(D - 1);
  const int heads = cfg_.deep_supervision ? D - 1 : 1;
  for (int d = 0; d < heads; ++d) heads_.emplace_back(cfg_.channels(0), cfg_.num_classes);
  up_shapes_.resize(blocks_.size());
}

template <class T>
void UNetPP<T>::init(Rng& rng) {
  for (auto& b : blocks_) b.init(rng);
  for (auto& h : heads_) h.init(rng);
}

template <class T>
std::vector<Tensor<T>> UNetPP<T>::forward(const Tensor<T>& x, Mode mode) {
  const int D = cfg_.depth;
  const int m = 1 << (D - 1);
  const Shape& s = x.shape();
  if (s.c != 1) throw ShapeError("unet++ expects a single input channel, got " + s.str());
  if (s.x % m != 0 || s.y % m != 0 || s.z % m != 0) {
    throw ShapeError("unet++ input " + s.str() + " not divisible by " + std::to_string(m));
  }
  outputs_.assign(blocks_.size(), Tensor<T>());
  for (int j = 0; j < D; ++j) {
    for (int i = 0; i + j < D; ++i) {
      const int idx = node_index(i, j);
      if (j == 0) {
        if (i == 0) {
          outputs_[idx] = blocks_[idx].forward(x, mode);
        } else {
          outputs_[idx] =
              blocks_[idx].forward(pools_[i - 1].forward(outputs_[node_index(i - 1, 0)], mode), mode);
        }
        continue;
      }
      const Tensor<T>& below = outputs_[node_index(i + 1, j - 1)];
      up_shapes_[idx] = below.shape();
      const Tensor<T> up = nn::upsample2x_forward(below);
      std::vector<const Tensor<T>*> parts;
      for (int k = 0; k < j; ++k) parts.push_back(&outputs_[node_index(i, k)]);
      parts.push_back(&up);
      outputs_[idx] = blocks_[idx].forward(nn::concat_channels(parts), mode);
    }
  }
  std::vector<Tensor<T>> logits;
  const int n_heads = mode == Mode::Eval ? 1 : num_heads();
  for (int d = 0; d < n_heads; ++d) {
    logits.push_back(heads_[d].forward(outputs_[node_index(0, D - 1 - d)], mode));
  }
  if (mode == Mode::Eval) outputs_.clear();
  return logits;
}

template <class T>
void UNetPP<T>::backward(const std::vector<Tensor<T>>& grad_heads) {
  const int D = cfg_.depth;
  if (static_cast<int>(grad_heads.size()) != num_heads()) {
    throw ShapeError("unet++ backward: expected one gradient per head");
  }
  if (outputs_.size() != blocks_.size()) throw StateError("unet++ backward without a train forward");
  std::vector<Tensor<T>> grads(blocks_.size());
  for (std::size_t k = 0; k < blocks_.size(); ++k) grads[k] = Tensor<T>(outputs_[k].shape());
  for (int d = 0; d < num_heads(); ++d) {
    nn::accumulate(grads[node_index(0, D - 1 - d)], heads_[d].backward(grad_heads[d]));
  }
  for (int j = D - 1; j >= 0; --j) {
    for (int i = D - 1 - j; i >= 0; --i) {
      const int idx = node_index(i, j);
      Tensor<T> gin = blocks_[idx].backward(grads[idx]);
      if (j == 0) {
        if (i > 0) nn::accumulate(grads[node_index(i - 1, 0)], pools_[i - 1].backward(gin));
        continue;
      }
      std::vector<int> split(j, cfg_.channels(i));
      split.push_back(cfg_.channels(i + 1));
      auto parts = nn::split_channels(gin, split);
      for (int k = 0; k < j; ++k) nn::accumulate(grads[node_index(i, k)], parts[k]);
      nn::accumulate(grads[node_index(i + 1, j - 1)],
                     nn::upsample2x_backward(parts[j], up_shapes_[idx]));
    }
  }
}

template <class T>
nn::ParamSet<T> UNetPP<T>::params() {
  nn::ParamSet<T> set;
  const int D = cfg_.depth;
  for (int j = 0; j < D; ++j) {
    for (int i = 0; i + j < D; ++i) {
      blocks_[node_index(i, j)].collect(set, "X" + std::to_string(i) + "_" + std::to_string(j));
    }
  }
  for (int d = 0; d < num_heads(); ++d) heads_[d].collect(set, "head" + std::to_string(d));
  return set;
}

template class ConvBlock<float>;
template class ConvBlock<double>;
template class UNetPP<float>;
template class UNetPP<double>;

// ---------------------------------------------------------------- losses

double soft_dice_loss(const Tensor<double>& probs, const LabelTensor& target,
                      Tensor<double>* grad_probs) {
  const Shape& s = probs.shape();
  if (target.shape() != Shape{s.n, 1, s.x, s.y, s.z}) {
    throw ShapeError("soft dice: target shape does not match probabilities");
  }
  const std::size_t V = s.spatial();
  if (grad_probs) *grad_probs = Tensor<double>(s);
  std::vector<int> present;
  std::vector<double> inter(s.c, 0.0), psum(s.c, 0.0), gsum(s.c, 0.0);
  for (int n = 0; n < s.n; ++n) {
    const std::uint8_t* lab = target.channel(n, 0);
    for (std::size_t i = 0; i < V; ++i) {
      if (lab[i] >= s.c) throw ValidationError("soft dice: label exceeds class count");
      gsum[lab[i]] += 1.0;
    }
    for (int c = 1; c < s.c; ++c) {
      const double* p = probs.channel(n, c);
      for (std::size_t i = 0; i < V; ++i) {
        psum[c] += p[i];
        if (lab[i] == c) inter[c] += p[i];
      }
    }
  }
  for (int c = 1; c < s.c; ++c) {
    if (gsum[c] > 0.0) present.push_back(c);
  }
  if (present.empty()) return 0.0;
  const double K = static_cast<double>(present.size());
  double loss = 0.0;
  for (int c : present) {
    const double den = psum[c] + gsum[c] + kDiceSmooth;
    const double num = 2.0 * inter[c] + kDiceSmooth;
    loss += 1.0 - num / den;
    if (grad_probs) {
      // d(1 - num/den)/dp = -(2 g den - num) / den^2
      const double a = -2.0 / (den * K);
      const double b = num / (den * den * K);
      for (int n = 0; n < s.n; ++n) {
        const std::uint8_t* lab = target.channel(n, 0);
        double* g = grad_probs->channel(n, c);
        for (std::size_t i = 0; i < V; ++i) g[i] = (lab[i] == c ? a : 0.0) + b;
      }
    }
  }
  return loss / K;
}

double cross_entropy_loss(const Tensor<double>& logits, const LabelTensor& target,
                          Tensor<double>* grad_logits) {
  const Shape& s = logits.shape();
  if (target.shape() != Shape{s.n, 1, s.x, s.y, s.z}) {
    throw ShapeError("cross entropy: target shape does not match logits");
  }
  const std::size_t V = s.spatial();
  const double M = static_cast<double>(V) * s.n;
  const Tensor<double> lp = nn::log_softmax_channels(logits);
  if (grad_logits) *grad_logits = Tensor<double>(s);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const std::uint8_t* lab = target.channel(n, 0);
    for (std::size_t i = 0; i < V; ++i) {
      if (lab[i] >= s.c) throw ValidationError("cross entropy: label exceeds class count");
      total -= lp.channel(n, lab[i])[i];
    }
    if (grad_logits) {
      for (int c = 0; c < s.c; ++c) {
        const double* l = lp.channel(n, c);
        double* g = grad_logits->channel(n, c);
        for (std::size_t i = 0; i < V; ++i) g[i] = (std::exp(l[i]) - (lab[i] == c ? 1.0 : 0.0)) / M;
      }
    }
  }
  return total / M;
}

std::vector<double> head_weights(int heads) {
  if (heads < 1) throw ParameterError("need at least one head");
  std::vector<double> w(heads);
  double sum = 0.0;
  for (int d = 0; d < heads; ++d) sum += w[d] = std::ldexp(1.0, -d);
  for (double& v : w) v /= sum;
  return w;
}

LabelTensor downsample_labels(const LabelTensor& labels, int x, int y, int z) {
  const Shape& s = labels.shape();
  if (x < 1 || y < 1 || z < 1 || s.x % x || s.y % y || s.z % z) {
    throw ShapeError("downsample_labels: target dims must divide the label dims");
  }
  const int fx = s.x / x, fy = s.y / y, fz = s.z / z;
  LabelTensor out(Shape{s.n, 1, x, y, z});
  for (int n = 0; n < s.n; ++n)
    for (int k = 0; k < z; ++k)
      for (int j = 0; j < y; ++j)
        for (int i = 0; i < x; ++i) out.at(n, 0, i, j, k) = labels.at(n, 0, i * fx, j * fy, k * fz);
  return out;
}

template <class T>
double combined_loss(const std::vector<Tensor<T>>& head_logits, const LabelTensor& target,
                     const SegNetConfig& cfg, std::vector<Tensor<T>>* grad_heads) {
  const auto w = head_weights(static_cast<int>(head_logits.size()));
  if (grad_heads) grad_heads->clear();
  double total = 0.0;
  for (std::size_t d = 0; d < head_logits.size(); ++d) {
    const Tensor<double> z = head_logits[d].template cast<double>();
    const Shape& s = z.shape();
    const LabelTensor t = s.same_spatial(target.shape())
                              ? target
                              : downsample_labels(target, s.x, s.y, s.z);
    const Tensor<double> p = nn::softmax_channels(z);
    Tensor<double> gp;
    Tensor<double> gz;
    const double dice = soft_dice_loss(p, t, grad_heads ? &gp : nullptr);
    const double ce = cross_entropy_loss(z, t, grad_heads ? &gz : nullptr);
    total += w[d] * (cfg.w_dice * dice + cfg.w_ce * ce);
    if (grad_heads) {
      const Tensor<double> gdice = nn::softmax_backward(p, gp);
      Tensor<T> g(s);
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = static_cast<T>(w[d] * (cfg.w_dice * gdice[i] + cfg.w_ce * gz[i]));
      }
      grad_heads->push_back(std::move(g));
    }
  }
  return total;
}

template double combined_loss<float>(const std::vector<Tensor<float>>&, const LabelTensor&,
                                     const SegNetConfig&, std::vector<Tensor<float>>*);
template double combined_loss<double>(const std::vector<Tensor<double>>&, const LabelTensor&,
                                      const SegNetConfig&, std::vector<Tensor<double>>*);

// ---------------------------------------------------------------- inference

namespace {

Tensor<float> grid_to_tensor(const VoxelGrid& g) {
  const Dims& d = g.dims();
  return Tensor<float>(Shape{1, 1, d.nx, d.ny, d.nz}, g.values());
}

}  // namespace

SegPrediction predict_segmentation(const VoxelGrid& image, const UNetPP<float>& net,
                                   const prep::PatchSpec& patch, int threads) {
  check_patch(net.config(), patch.patch, "inference patch");
  const Dims& dims = image.dims();
  const auto corners = prep::patch_corners(dims, patch);
  const int K = net.config().num_classes;
  prep::PatchAccumulator acc(dims, K);
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(corners.size())));
  std::vector<UNetPP<float>> nets(workers, net);
  // Run patches in chunks so memory stays bounded, then merge each chunk in order.
  const std::size_t chunk = static_cast<std::size_t>(workers) * 2;
  for (std::size_t c0 = 0; c0 < corners.size(); c0 += chunk) {
    const std::size_t c1 = std::min(corners.size(), c0 + chunk);
    std::vector<std::vector<float>> results(c1 - c0);
    std::atomic<std::size_t> next{c0};
    auto work = [&](int w) {
      for (std::size_t k = next++; k < c1; k = next++) {
        const VoxelGrid p = prep::extract_patch(image, corners[k], patch.patch);
        const auto logits = nets[w].forward(grid_to_tensor(p), Mode::Eval);
        results[k - c0] = nn::softmax_channels(logits[0]).vec();
      }
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }
    for (std::size_t k = c0; k < c1; ++k) acc.add(corners[k], patch.patch, results[k - c0]);
  }
  const std::vector<float> avg = acc.finish();
  const std::size_t V = dims.count();
  SegPrediction out;
  std::vector<std::uint8_t> labels(V, 0);
  for (int c = 0; c < K; ++c) {
    out.probabilities.emplace_back(
        image.geometry(), std::vector<float>(avg.begin() + c * V, avg.begin() + (c + 1) * V));
  }
  for (std::size_t i = 0; i < V; ++i) {
    int best = 0;
    for (int c = 1; c < K; ++c) {
      if (avg[c * V + i] > avg[best * V + i]) best = c;
    }
    labels[i] = static_cast<std::uint8_t>(best);
  }
  out.labels = LabelMask(image.geometry(), std::move(labels));
  return out;
}

double mean_organ_dice(const LabelMask& pred, const LabelMask& truth) {
  if (pred.dims() != truth.dims()) throw ShapeError("mean_organ_dice: dims differ");
  std::array<double, 6> inter{}, ps{}, ts{};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ps[pred[i]] += 1;
    ts[truth[i]] += 1;
    if (pred[i] == truth[i]) inter[truth[i]] += 1;
  }
  double sum = 0.0;
  int n = 0;
  for (int c = 1; c < 6; ++c) {
    if (ts[c] == 0) continue;
    sum += 2.0 * inter[c] / (ps[c] + ts[c]);
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

// ---------------------------------------------------------------- training

bool in_validation_split(const std::string& id, std::uint64_t seed, double val_fraction) {
  if (val_fraction <= 0.0) return false;
  const std::uint64_t h = Rng::mix(stable_hash(id) ^ Rng::mix(seed));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < val_fraction;
}

namespace {

struct Snapshot {
  std::vector<std::vector<float>> tensors;
};

Snapshot take_snapshot(UNetPP<float>& net) {
  Snapshot s;
  auto set = net.params();
  for (auto& p : set.params) s.tensors.push_back(p.param->value().vec());
  for (auto& b : set.buffers) s.tensors.push_back(b.buffer->vec());
  return s;
}

void restore_snapshot(UNetPP<float>& net, const Snapshot& s) {
  auto set = net.params();
  std::size_t k = 0;
  for (auto& p : set.params) p.param->value().vec() = s.tensors[k++];
  for (auto& b : set.buffers) b.buffer->vec() = s.tensors[k++];
}

// Per-sample foreground voxel lists, grouped by organ label.
struct Foreground {
  std::vector<std::vector<std::uint32_t>> by_label;  // index = label - 1
};

Foreground collect_foreground(const LabelMask& m) {
  Foreground f;
  f.by_label.resize(5);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] > 0) f.by_label[m[i] - 1].push_back(static_cast<std::uint32_t>(i));
  }
  return f;
}

Index3 sample_corner(const Dims& dims, const Dims& patch, const Foreground& fg, bool centred,
                     Rng& rng) {
  Index3 c{0, 0, 0};
  std::vector<int> organs;
  for (int k = 0; k < 5; ++k) {
    if (!fg.by_label[k].empty()) organs.push_back(k);
  }
  const bool use_fg = centred && !organs.empty();
  Index3 centre{};
  if (use_fg) {
    const auto& vox = fg.by_label[organs[rng.below(organs.size())]];
    centre = dims.coords(vox[rng.below(vox.size())]);
  }
  for (int a = 0; a < 3; ++a) {
    const int hi = std::max(0, dims[a] - patch[a]);
    int v;
    if (use_fg) {
      const int jitter = patch[a] / 4;
      v = centre[a] - patch[a] / 2 + rng.uniform_int(-jitter, jitter);
    } else {
      v = rng.uniform_int(0, hi);
    }
    c[a] = std::clamp(v, 0, hi);
  }
  return c;
}

}  // namespace

SegTrainResult train_segmentation(const std::vector<SegSample>& data, const SegNetConfig& net_cfg,
                                  const SegTrainConfig& cfg, std::uint64_t seed, int threads,
                                  const SegTrainHooks& hooks) {
  net_cfg.validate();
  cfg.validate();
  check_patch(net_cfg, cfg.train_patch, "training patch");
  check_patch(net_cfg, cfg.infer_patch.patch, "inference patch");
  if (data.empty()) throw ParameterError("segmentation training set is empty");

  std::vector<const SegSample*> train, val;
  for (const auto& s : data) {
    (in_validation_split(s.id, seed, cfg.val_fraction) ? val : train).push_back(&s);
  }
  if (train.empty()) {
    // Every volume hashed into validation; train on all of them instead.
    train = val;
    val.clear();
  }
  std::vector<Foreground> fg;
  for (const SegSample* s : train) fg.push_back(collect_foreground(s->labels));

  const Rng root(seed);
  Rng init_rng = root.split("segnet.init");
  Rng sample_rng = root.split("segnet.sample");

  SegTrainResult result;
  UNetPP<float> net(net_cfg);
  net.init(init_rng);
  nn::Adam<float> opt(net.params(), cfg.adam);
  const nn::LrSchedule schedule = cfg.effective_schedule();

  const Dims& P = cfg.train_patch;
  const int B = cfg.batch_size;
  Snapshot best;
  double best_score = -std::numeric_limits<double>::infinity();
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      Tensor<float> x(Shape{B, 1, P.nx, P.ny, P.nz});
      LabelTensor y(Shape{B, 1, P.nx, P.ny, P.nz});
      for (int b = 0; b < B; ++b) {
        const std::size_t k = sample_rng.below(train.size());
        const bool centred = sample_rng.uniform() < cfg.foreground_fraction;
        const Index3 c =
            sample_corner(train[k]->image.dims(), P, fg[k], centred, sample_rng);
        const VoxelGrid img = prep::extract_patch(train[k]->image, c, P);
        const LabelMask lab = prep::extract_patch(train[k]->labels, c, P);
        std::copy(img.values().begin(), img.values().end(), x.channel(b, 0));
        std::copy(lab.values().begin(), lab.values().end(), y.channel(b, 0));
      }
      lr = nn::schedule_lr(schedule, epoch, s, cfg.steps_per_epoch);
      opt.zero_grad();
      const auto logits = net.forward(x, Mode::Train);
      std::vector<Tensor<float>> grads;
      const double loss = combined_loss(logits, y, net_cfg, &grads);
      net.backward(grads);
      opt.step(lr);
      ++step;
      epoch_loss += loss;
      result.step_losses.push_back(loss);
    }
    SegLogRow row;
    row.epoch = epoch;
    row.step = step;
    row.lr = lr;
    row.loss = epoch_loss / cfg.steps_per_epoch;
    double score;
    if (val.empty()) {
      row.val_dice = std::numeric_limits<double>::quiet_NaN();
      score = -row.loss;
    } else {
      double dsum = 0.0;
      for (const SegSample* v : val) {
        dsum += mean_organ_dice(predict_segmentation(v->image, net, cfg.infer_patch, threads).labels,
                                v->labels);
      }
      row.val_dice = dsum / static_cast<double>(val.size());
      score = row.val_dice;
    }
    if (score > best_score || epoch == 0) {
      best_score = score;
      best = take_snapshot(net);
      result.best_epoch = epoch;
      result.best_val_dice = row.val_dice;
    }
    result.log.push_back(row);
    if (hooks.on_epoch) hooks.on_epoch(row);
  }
  result.net = UNetPP<float>(net_cfg);
  restore_snapshot(result.net, best);
  return result;
}

std::string log_csv(const std::vector<SegLogRow>& log) {
  std::string out = "epoch,step,lr,loss,val_dice\n";
  char buf[160];
  for (const auto& r : log) {
    if (std::isnan(r.val_dice)) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,nan\n", r.epoch, r.step, r.lr, r.loss);
    } else {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.lr, r.loss,
                    r.val_dice);
    }
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- persistence

void save_segmentation(const std::filesystem::path& stem, UNetPP<float>& net, int epoch,
                       const nn::LrSchedule& schedule) {
  nn::CheckpointMeta meta;
  meta.model = kSegModelName;
  meta.epoch = epoch;
  meta.schedule = nn::schedule_to_json(schedule);
  meta.config = net.config().to_json();
  nn::save_checkpoint(stem, net.params(), meta);
}

UNetPP<float> load_segmentation(const std::filesystem::path& stem,
                                const std::optional<SegNetConfig>& expected) {
  const nn::CheckpointMeta meta = nn::read_checkpoint_meta(stem);
  SegNetConfig cfg;
  try {
    cfg = SegNetConfig::from_json(meta.config);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("segmentation checkpoint config: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw FormatError("segmentation checkpoint was trained with a different network config");
  }
  UNetPP<float> net(cfg);
  auto set = net.params();
  nn::load_checkpoint(stem, set, kSegModelName);
  return net;
}

}  // namespace ctm::seg
