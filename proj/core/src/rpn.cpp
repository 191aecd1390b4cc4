#include "ctm/rpn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <thread>

#include "ctm/nn/checkpoint.hpp"
#include "ctm/nn/losses.hpp"
#include "ctm/preprocess.hpp"

namespace ctm::rpn {

using nn::Mode;
using nn::Shape;
using nn::Tensor;

// ---------------------------------------------------------------- boxes

BoxF BoxF::from(const Box3D& b) {
  BoxF f;
  for (int a = 0; a < 3; ++a) {
    f.lo[a] = b.lo()[a];
    f.hi[a] = b.hi()[a];
  }
  return f;
}

double BoxF::volume() const {
  double v = 1.0;
  for (int a = 0; a < 3; ++a) v *= std::max(0.0, size(a));
  return v;
}

Box3D BoxF::rounded() const {
  Index3 l, h;
  for (int a = 0; a < 3; ++a) {
    l[a] = static_cast<int>(std::lround(lo[a]));
    h[a] = std::max(l[a] + 1, static_cast<int>(std::lround(hi[a])));
  }
  return Box3D(l, h);
}

double iou(const BoxF& a, const BoxF& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(a.lo[k], b.lo[k]);
    const double hi = std::min(a.hi[k], b.hi[k]);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Deltas bbox_encode(const BoxF& anchor, const BoxF& target) {
  Deltas d{};
  for (int a = 0; a < 3; ++a) {
    if (!(anchor.size(a) > 0.0) || !(target.size(a) > 0.0)) {
      throw ParameterError("bbox_encode needs positive box extents");
    }
    d[a] = (target.center(a) - anchor.center(a)) / anchor.size(a);
    d[3 + a] = std::log(target.size(a) / anchor.size(a));
  }
  return d;
}

BoxF bbox_decode(const BoxF& anchor, const Deltas& d) {
  BoxF b;
  for (int a = 0; a < 3; ++a) {
    const double c = anchor.center(a) + d[a] * anchor.size(a);
    const double s = anchor.size(a) * std::exp(d[3 + a]);
    b.lo[a] = c - 0.5 * s;
    b.hi[a] = c + 0.5 * s;
  }
  return b;
}

BoxF clip_box(const BoxF& b, const Dims& dims) {
  constexpr double kMinExtent = 1e-3;
  BoxF c;
  for (int a = 0; a < 3; ++a) {
    const double n = dims[a];
    c.lo[a] = std::clamp(b.lo[a], 0.0, n - kMinExtent);
    c.hi[a] = std::clamp(b.hi[a], c.lo[a] + kMinExtent, n);
  }
  return c;
}

std::vector<BoxF> generate_anchors(const Dims& feature_dims,
                                   const std::vector<std::array<double, 3>>& sizes, int stride) {
  if (stride < 1) throw ParameterError("anchor stride must be >= 1");
  std::vector<BoxF> out;
  out.reserve(feature_dims.count() * sizes.size());
  for (int z = 0; z < feature_dims.nz; ++z) {
    for (int y = 0; y < feature_dims.ny; ++y) {
      for (int x = 0; x < feature_dims.nx; ++x) {
        const std::array<double, 3> c = {(x + 0.5) * stride, (y + 0.5) * stride, (z + 0.5) * stride};
        for (const auto& s : sizes) {
          BoxF b;
          for (int a = 0; a < 3; ++a) {
            b.lo[a] = c[a] - 0.5 * s[a];
            b.hi[a] = c[a] + 0.5 * s[a];
          }
          out.push_back(b);
        }
      }
    }
  }
  return out;
}

std::vector<std::size_t> nms_3d(const std::vector<Proposal>& proposals, double iou_threshold) {
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return proposals[a].score > proposals[b].score;
  });
  std::vector<std::size_t> keep;
  std::vector<bool> dead(proposals.size(), false);
  for (std::size_t i : order) {
    if (dead[i]) continue;
    keep.push_back(i);
    for (std::size_t j : order) {
      if (!dead[j] && j != i && iou(proposals[i].box, proposals[j].box) > iou_threshold) {
        dead[j] = true;
      }
    }
  }
  return keep;
}

// ---------------------------------------------------------------- config

namespace {

nlohmann::json dims_json(const Dims& d) { return {d.nx, d.ny, d.nz}; }
Dims dims_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-element dims array");
  return Dims(j[0].get<int>(), j[1].get<int>(), j[2].get<int>());
}

}  // namespace

void MeasureNetConfig::validate() const {
  const int m = feature_stride();
  for (int a = 0; a < 3; ++a) {
    if (patch[a] % m != 0) {
      throw ConfigError("measurement patch dims must be divisible by " + std::to_string(m));
    }
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("measurement backbone channels must be >= 1");
  }
  if (rpn_channels < 1 || hidden < 1) throw ConfigError("rpn_channels and hidden must be >= 1");
  if (anchor_scales_mm.empty()) throw ConfigError("at least one anchor scale is required");
  for (double s : anchor_scales_mm) {
    if (!(s > 0.0)) throw ConfigError("anchor scales must be positive");
  }
  if (!(negative_iou > 0.0 && negative_iou <= positive_iou && positive_iou <= 1.0)) {
    throw ConfigError("anchor IoU thresholds must satisfy 0 < negative <= positive <= 1");
  }
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw ConfigError("nms_iou must lie in (0, 1]");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) {
    throw ConfigError("score_threshold must lie in [0, 1]");
  }
  if (roi_block < 0 || roi_block >= kBackboneBlocks) throw ConfigError("roi_block must lie in [0, 3]");
  for (const auto& [organ, rate] : dropout) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rates must lie in [0, 1)");
  }
}

Dims MeasureNetConfig::feature_dims() const {
  const int s = feature_stride();
  return Dims(patch.nx / s, patch.ny / s, patch.nz / s);
}

double MeasureNetConfig::dropout_for(OrganId organ) const {
  const auto it = dropout.find(organ);
  return it == dropout.end() ? 0.0 : it->second;
}

std::vector<std::array<double, 3>> MeasureNetConfig::anchor_sizes(const Spacing& spacing) const {
  std::vector<std::array<double, 3>> out;
  for (double s : anchor_scales_mm) out.push_back({s / spacing.dx, s / spacing.dy, s / spacing.dz});
  return out;
}

nlohmann::json MeasureNetConfig::to_json() const {
  nlohmann::json drop = nlohmann::json::object();
  for (const auto& [organ, rate] : dropout) drop[std::string(organ_name(organ))] = rate;
  return {{"patch", dims_json(patch)},
          {"channels", channels},
          {"rpn_channels", rpn_channels},
          {"anchor_scales_mm", anchor_scales_mm},
          {"positive_iou", positive_iou},
          {"negative_iou", negative_iou},
          {"nms_iou", nms_iou},
          {"score_threshold", score_threshold},
          {"roi_block", roi_block},
          {"hidden", hidden},
          {"dropout", drop}};
}

MeasureNetConfig MeasureNetConfig::from_json(const nlohmann::json& j) {
  MeasureNetConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "patch") c.patch = dims_from(v);
      else if (key == "channels") c.channels = v.get<std::array<int, kBackboneBlocks>>();
      else if (key == "rpn_channels") c.rpn_channels = v.get<int>();
      else if (key == "anchor_scales_mm") c.anchor_scales_mm = v.get<std::vector<double>>();
      else if (key == "positive_iou") c.positive_iou = v.get<double>();
      else if (key == "negative_iou") c.negative_iou = v.get<double>();
      else if (key == "nms_iou") c.nms_iou = v.get<double>();
      else if (key == "score_threshold") c.score_threshold = v.get<double>();
      else if (key == "roi_block") c.roi_block = v.get<int>();
      else if (key == "hidden") c.hidden = v.get<int>();
      else if (key == "dropout") {
        c.dropout.clear();
        for (const auto& [name, rate] : v.items()) c.dropout[organ_from_name(name)] = rate.get<double>();
      } else {
        throw ConfigError("unknown measurement network key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed measurement network config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

void MeasureTrainConfig::validate() const {
  if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1) {
    throw ConfigError("measurement epochs, steps_per_epoch and batch_size must be >= 1");
  }
  if (box_jitter < 0) throw ConfigError("box_jitter must be >= 0");
  adam.validate();
  try {
    nn::validate(backbone_schedule);
    for (const auto& [organ, s] : head_schedules) nn::validate(s);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  for (OrganId organ : kAllOrgans) {
    if (!head_schedules.count(organ)) {
      throw ConfigError("missing head schedule for " + std::string(organ_name(organ)));
    }
  }
}

const nn::LrSchedule& MeasureTrainConfig::head_schedule(OrganId organ) const {
  return head_schedules.at(organ);
}

nlohmann::json MeasureTrainConfig::to_json() const {
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [organ, s] : head_schedules) heads[std::string(organ_name(organ))] = nn::schedule_to_json(s);
  return {{"epochs", epochs},
          {"steps_per_epoch", steps_per_epoch},
          {"batch_size", batch_size},
          {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}},
          {"backbone_schedule", nn::schedule_to_json(backbone_schedule)},
          {"head_schedules", heads},
          {"box_jitter", box_jitter}};
}

MeasureTrainConfig MeasureTrainConfig::from_json(const nlohmann::json& j) {
  MeasureTrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") c.epochs = v.get<int>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "box_jitter") c.box_jitter = v.get<int>();
      else if (key == "backbone_schedule") c.backbone_schedule = nn::schedule_from_json(v);
      else if (key == "head_schedules") {
        for (const auto& [name, s] : v.items()) c.head_schedules[organ_from_name(name)] = nn::schedule_from_json(s);
      } else if (key == "adam") {
        for (const auto& [ak, av] : v.items()) {
          if (ak == "beta1") c.adam.beta1 = av.get<double>();
          else if (ak == "beta2") c.adam.beta2 = av.get<double>();
          else if (ak == "eps") c.adam.eps = av.get<double>();
          else throw ConfigError("unknown adam key '" + ak + "'");
        }
      } else {
        throw ConfigError("unknown measurement training key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed measurement training config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- ROI pooling

Box3D to_feature_box(const Box3D& voxel_box, int stride, const Dims& fd) {
  Index3 lo, hi;
  for (int a = 0; a < 3; ++a) {
    const int l = voxel_box.lo()[a] >= 0 ? voxel_box.lo()[a] / stride
                                         : -((-voxel_box.lo()[a] + stride - 1) / stride);
    const int h = voxel_box.hi()[a] >= 0 ? (voxel_box.hi()[a] + stride - 1) / stride
                                         : -((-voxel_box.hi()[a]) / stride);
    lo[a] = std::clamp(l, 0, fd[a] - 1);
    hi[a] = std::clamp(h, lo[a] + 1, fd[a]);
  }
  return Box3D(lo, hi);
}

template <class T>
Tensor<T> roi_pool(const Tensor<T>& features, int item, const Box3D& box,
                   std::vector<std::size_t>* argmax) {
  const Shape& s = features.shape();
  if (item < 0 || item >= s.n) throw ShapeError("roi_pool item out of range");
  if (!box.within(Dims(s.x, s.y, s.z))) throw BoundsError("roi_pool box outside the feature map");
  const auto [GX, GY, GZ] = kRoiGrid;
  Tensor<T> out(Shape{1, s.c, GX, GY, GZ});
  if (argmax) argmax->assign(out.size(), 0);
  auto range = [&](int a, int g, int G) {
    const int E = box.extent(a);
    int b0 = box.lo()[a] + (g * E) / G;
    int b1 = box.lo()[a] + ((g + 1) * E + G - 1) / G;
    if (b1 <= b0) {
      // Empty cell: take the nearest contained voxel.
      b0 = box.lo()[a] + std::min(E - 1, ((2 * g + 1) * E) / (2 * G));
      b1 = b0 + 1;
    }
    return std::pair{b0, b1};
  };
  for (int c = 0; c < s.c; ++c) {
    for (int gz = 0; gz < GZ; ++gz) {
      const auto [z0, z1] = range(2, gz, GZ);
      for (int gy = 0; gy < GY; ++gy) {
        const auto [y0, y1] = range(1, gy, GY);
        for (int gx = 0; gx < GX; ++gx) {
          const auto [x0, x1] = range(0, gx, GX);
          std::size_t best = features.index(item, c, x0, y0, z0);
          for (int z = z0; z < z1; ++z)
            for (int y = y0; y < y1; ++y)
              for (int x = x0; x < x1; ++x) {
                const std::size_t i = features.index(item, c, x, y, z);
                if (features[i] > features[best]) best = i;
              }
          const std::size_t o = out.index(0, c, gx, gy, gz);
          out[o] = features[best];
          if (argmax) (*argmax)[o] = best;
        }
      }
    }
  }
  return out;
}

template <class T>
void roi_pool_backward(const Tensor<T>& grad_pooled, const std::vector<std::size_t>& argmax,
                       Tensor<T>& grad_features) {
  if (argmax.size() != grad_pooled.size()) throw ShapeError("roi_pool_backward argmax size mismatch");
  for (std::size_t i = 0; i < argmax.size(); ++i) grad_features[argmax[i]] += grad_pooled[i];
}

// ---------------------------------------------------------------- network

template <class T>
MeasureHead<T>::MeasureHead(int in_features, int hidden, int outputs, double dropout)
    : fc1_(in_features, hidden), drop_(dropout), fc2_(hidden, outputs) {}

template <class T>
Tensor<T> MeasureHead<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  return fc2_.forward(drop_.forward(relu_.forward(fc1_.forward(x, mode), mode), mode, rng), mode);
}

template <class T>
Tensor<T> MeasureHead<T>::backward(const Tensor<T>& g) {
  return fc1_.backward(relu_.backward(drop_.backward(fc2_.backward(g))));
}

template <class T>
void MeasureHead<T>::init(Rng& rng) {
  fc1_.init(rng);
  fc2_.init(rng);
  // Normalized targets are O(0.1); start the regression output near zero.
  auto& w = fc2_.weight().value();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] *= T(0.1);
}

template <class T>
void MeasureHead<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  fc1_.collect(set, prefix + ".fc1");
  fc2_.collect(set, prefix + ".fc2");
}

template <class T>
MeasureNet<T>::MeasureNet(const MeasureNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int in = 1;
  for (int b = 0; b < kBackboneBlocks; ++b) {
    convs_.emplace_back(in, cfg_.channels[b]);
    bns_.emplace_back(cfg_.channels[b]);
    relus_.emplace_back();
    if (b > 0) pools_.emplace_back();
    in = cfg_.channels[b];
  }
  rpn_conv_ = nn::Conv3d<T>(in, cfg_.rpn_channels);
  rpn_out_ = nn::PointwiseConv<T>(cfg_.rpn_channels, cfg_.num_anchors_per_cell() * kAnchorOutputs);
  for (int k = 0; k < kNumOrganClasses; ++k) {
    const OrganId organ = organ_of_class(k);
    heads_.emplace_back(head_inputs(), cfg_.hidden, static_cast<int>(quantities_for(organ).size()),
                        cfg_.dropout_for(organ));
  }
}

template <class T>
int MeasureNet<T>::head_inputs() const {
  return cfg_.channels[cfg_.roi_block] * kRoiGrid[0] * kRoiGrid[1] * kRoiGrid[2] + kHeadGeometry;
}

template <class T>
void MeasureNet<T>::init(Rng& rng) {
  for (auto& c : convs_) c.init(rng);
  rpn_conv_.init(rng);
  rpn_out_.init(rng);
  for (auto& h : heads_) h.init(rng);
}

template <class T>
MeasureForward<T> MeasureNet<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& s = x.shape();
  if (s.c != 1 || s.x != cfg_.patch.nx || s.y != cfg_.patch.ny || s.z != cfg_.patch.nz) {
    throw ShapeError("measurement input " + s.str() + " does not match the configured patch");
  }
  MeasureForward<T> out;
  Tensor<T> h = x;
  for (int b = 0; b < kBackboneBlocks; ++b) {
    if (b > 0) h = pools_[b - 1].forward(h, mode);
    h = relus_[b].forward(bns_[b].forward(convs_[b].forward(h, mode), mode), mode);
    if (b == cfg_.roi_block) out.roi_features = h;
  }
  out.rpn = rpn_out_.forward(rpn_relu_.forward(rpn_conv_.forward(h, mode), mode), mode);
  return out;
}

template <class T>
void MeasureNet<T>::backward(const Tensor<T>& grad_rpn, const Tensor<T>& grad_roi) {
  Tensor<T> g = rpn_conv_.backward(rpn_relu_.backward(rpn_out_.backward(grad_rpn)));
  for (int b = kBackboneBlocks - 1; b >= 0; --b) {
    if (b == cfg_.roi_block && !grad_roi.empty()) nn::accumulate(g, grad_roi);
    g = convs_[b].backward(bns_[b].backward(relus_[b].backward(g)));
    if (b > 0) g = pools_[b - 1].backward(g);
  }
}

template <class T>
nn::ParamSet<T> MeasureNet<T>::backbone_params() {
  nn::ParamSet<T> set;
  for (int b = 0; b < kBackboneBlocks; ++b) {
    convs_[b].collect(set, "block" + std::to_string(b) + ".conv");
    bns_[b].collect(set, "block" + std::to_string(b) + ".bn");
  }
  rpn_conv_.collect(set, "rpn.conv");
  rpn_out_.collect(set, "rpn.out");
  return set;
}

template <class T>
nn::ParamSet<T> MeasureNet<T>::head_params(OrganId organ) {
  nn::ParamSet<T> set;
  heads_[class_of(organ)].collect(set, "head." + std::string(organ_name(organ)));
  return set;
}

template <class T>
nn::ParamSet<T> MeasureNet<T>::params() {
  nn::ParamSet<T> set = backbone_params();
  for (int k = 0; k < kNumOrganClasses; ++k) {
    auto h = head_params(organ_of_class(k));
    set.params.insert(set.params.end(), h.params.begin(), h.params.end());
  }
  return set;
}

template <class T>
Tensor<T> head_input(const std::vector<Tensor<T>>& pooled,
                     const std::vector<std::array<double, 3>>& extents_mm) {
  if (pooled.empty() || pooled.size() != extents_mm.size()) {
    throw ShapeError("head_input needs one extent per pooled feature block");
  }
  const std::size_t F = pooled.front().size();
  const int m = static_cast<int>(pooled.size());
  const std::size_t W = F + kHeadGeometry;
  Tensor<T> x(Shape{m, static_cast<int>(W), 1, 1, 1});
  // 1 cc = 1000 mm^3, so the box volume lands on the same scale as the volume target.
  const double vol_scale = normalization_scale(Quantity::VolumeCc) * 1000.0;
  for (int i = 0; i < m; ++i) {
    if (pooled[i].size() != F) throw ShapeError("pooled feature blocks differ in size");
    T* row = x.data() + static_cast<std::size_t>(i) * W;
    std::copy(pooled[i].vec().begin(), pooled[i].vec().end(), row);
    const auto& e = extents_mm[i];
    for (int a = 0; a < 3; ++a) {
      row[F + a] = static_cast<T>(e[a] / normalization_scale(Quantity::LengthMm));
    }
    row[F + 3] = static_cast<T>(e[0] * e[1] * e[2] / vol_scale);
  }
  return x;
}

// ---------------------------------------------------------------- losses

AnchorTargets assign_anchors(const std::vector<BoxF>& anchors, const std::vector<GtBox>& gt,
                             const std::vector<BoxF>& ignore, double positive, double negative) {
  const std::size_t A = anchors.size();
  AnchorTargets t;
  t.label.assign(A, 0);
  t.deltas.assign(A, Deltas{});
  t.cls.assign(A, -1);
  std::vector<double> best_iou(A, 0.0);
  std::vector<int> best_gt(A, -1);
  for (std::size_t i = 0; i < A; ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt[g].box);
      if (v > best_iou[i]) {
        best_iou[i] = v;
        best_gt[i] = static_cast<int>(g);
      }
    }
    if (best_iou[i] >= positive) {
      t.label[i] = 1;
    } else if (best_iou[i] >= negative) {
      t.label[i] = -1;
    } else {
      for (const auto& b : ignore) {
        if (iou(anchors[i], b) >= negative) {
          t.label[i] = -1;
          break;
        }
      }
    }
  }
  // Every ground-truth box keeps at least its best-matching anchor.
  for (std::size_t g = 0; g < gt.size(); ++g) {
    double best = 0.0;
    std::size_t arg = A;
    for (std::size_t i = 0; i < A; ++i) {
      const double v = iou(anchors[i], gt[g].box);
      if (v > best) {
        best = v;
        arg = i;
      }
    }
    if (arg < A) {
      t.label[arg] = 1;
      best_gt[arg] = static_cast<int>(g);
    }
  }
  // Regression and class targets also cover the ignore band, so every anchor
  // that can fire near an organ has trained deltas.
  for (std::size_t i = 0; i < A; ++i) {
    if (t.label[i] != 1 && (best_gt[i] < 0 || best_iou[i] < negative)) continue;
    const GtBox& g = gt[best_gt[i]];
    t.deltas[i] = bbox_encode(anchors[i], g.box);
    t.cls[i] = class_of(g.organ);
  }
  return t;
}

template <class T>
double rpn_loss(const Tensor<T>& out, const std::vector<AnchorTargets>& targets, Tensor<T>* grad) {
  const Shape& s = out.shape();
  if (static_cast<int>(targets.size()) != s.n || s.c % kAnchorOutputs != 0) {
    throw ShapeError("rpn_loss targets do not match the output batch");
  }
  const int A = s.c / kAnchorOutputs;
  const std::size_t cells = s.spatial();
  for (const auto& t : targets) {
    if (t.label.size() != cells * A) throw ShapeError("rpn_loss anchor count mismatch");
  }
  if (grad) *grad = Tensor<T>(s);
  std::size_t pos = 0, neg = 0, reg = 0;
  for (const auto& t : targets) {
    for (auto l : t.label) {
      pos += l == 1;
      neg += l == 0;
    }
    for (int c : t.cls) reg += c >= 0;
  }
  const double w_pos = pos == 0 ? 0.0 : (neg == 0 ? 1.0 : 0.5) / static_cast<double>(pos);
  const double w_neg = neg == 0 ? 0.0 : (pos == 0 ? 1.0 : 0.5) / static_cast<double>(neg);
  const double w_box = reg == 0 ? 0.0 : 1.0 / static_cast<double>(reg);

  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const AnchorTargets& t = targets[n];
    for (std::size_t cell = 0; cell < cells; ++cell) {
      for (int a = 0; a < A; ++a) {
        const std::size_t i = cell * A + a;
        const int label = t.label[i];
        auto ch = [&](int k) { return out.channel(n, a * kAnchorOutputs + k)[cell]; };
        auto gch = [&](int k) -> T& { return grad->channel(n, a * kAnchorOutputs + k)[cell]; };
        if (label >= 0) {
          const double w = label == 1 ? w_pos : w_neg;
          const double o = ch(0);
          loss += w * nn::bce_with_logits(o, label);
          if (grad) gch(0) = static_cast<T>(w * nn::bce_with_logits_grad(o, label));
        }
        if (t.cls[i] < 0) continue;
        for (int j = 0; j < 6; ++j) {
          const double d = ch(1 + j) - t.deltas[i][j];
          loss += w_box * nn::smooth_l1(d);
          if (grad) gch(1 + j) = static_cast<T>(w_box * nn::smooth_l1_grad(d));
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < kNumOrganClasses; ++k) mx = std::max(mx, static_cast<double>(ch(7 + k)));
        double z = 0.0;
        for (int k = 0; k < kNumOrganClasses; ++k) z += std::exp(ch(7 + k) - mx);
        const double lse = mx + std::log(z);
        loss += w_box * (lse - ch(7 + t.cls[i]));
        if (grad) {
          for (int k = 0; k < kNumOrganClasses; ++k) {
            const double p = std::exp(ch(7 + k) - lse);
            gch(7 + k) = static_cast<T>(w_box * (p - (k == t.cls[i] ? 1.0 : 0.0)));
          }
        }
      }
    }
  }
  return loss;
}

template <class T>
double measurement_loss(const Tensor<T>& predicted, const std::vector<std::vector<double>>& targets,
                        Tensor<T>* grad) {
  const Shape& s = predicted.shape();
  const std::size_t per = static_cast<std::size_t>(s.c) * s.spatial();
  if (static_cast<int>(targets.size()) != s.n) throw ShapeError("measurement_loss batch mismatch");
  for (const auto& t : targets) {
    if (t.size() != per) throw ShapeError("measurement_loss output count mismatch");
  }
  if (grad) *grad = Tensor<T>(s);
  const double inv = 1.0 / static_cast<double>(predicted.size());
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t k = 0; k < per; ++k) {
      const std::size_t i = static_cast<std::size_t>(n) * per + k;
      const double d = predicted[i] - targets[n][k];
      loss += d * d * inv;
      if (grad) (*grad)[i] = static_cast<T>(2.0 * d * inv);
    }
  }
  return loss;
}

#define CTM_INSTANTIATE_RPN(T)                                                                  \
  template class MeasureHead<T>;                                                                \
  template class MeasureNet<T>;                                                                 \
  template Tensor<T> roi_pool<T>(const Tensor<T>&, int, const Box3D&, std::vector<std::size_t>*); \
  template void roi_pool_backward<T>(const Tensor<T>&, const std::vector<std::size_t>&,          \
                                     Tensor<T>&);                                               \
  template Tensor<T> head_input<T>(const std::vector<Tensor<T>>&,                               \
                                   const std::vector<std::array<double, 3>>&);                  \
  template double rpn_loss<T>(const Tensor<T>&, const std::vector<AnchorTargets>&, Tensor<T>*);  \
  template double measurement_loss<T>(const Tensor<T>&, const std::vector<std::vector<double>>&, \
                                      Tensor<T>*);

CTM_INSTANTIATE_RPN(float)
CTM_INSTANTIATE_RPN(double)

// ---------------------------------------------------------------- training

std::vector<Index3> measurement_corners(const Dims& dims, const Dims& patch) {
  Dims stride(std::max(1, patch.nx / 2), std::max(1, patch.ny / 2), std::max(1, patch.nz / 2));
  return prep::patch_corners(dims, prep::PatchSpec(patch, stride));
}

namespace {

Tensor<float> grid_tensor(const VoxelGrid& g) {
  const Dims& d = g.dims();
  return Tensor<float>(Shape{1, 1, d.nx, d.ny, d.nz}, g.values());
}

bool box_inside(const Box3D& b, const Index3& corner, const Dims& patch) {
  for (int a = 0; a < 3; ++a) {
    if (b.lo()[a] < corner[a] || b.hi()[a] > corner[a] + patch[a]) return false;
  }
  return true;
}

Box3D shift(const Box3D& b, const Index3& by, int sign) {
  return Box3D({b.lo().x + sign * by.x, b.lo().y + sign * by.y, b.lo().z + sign * by.z},
               {b.hi().x + sign * by.x, b.hi().y + sign * by.y, b.hi().z + sign * by.z});
}

std::optional<Box3D> intersect(const Box3D& b, const Dims& d) {
  Index3 lo, hi;
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, b.lo()[a]);
    hi[a] = std::min(d[a], b.hi()[a]);
    if (hi[a] <= lo[a]) return std::nullopt;
  }
  return Box3D(lo, hi);
}

std::array<double, 3> extents_mm(const Box3D& b, const Spacing& s) {
  return {b.extent(0) * s.dx, b.extent(1) * s.dy, b.extent(2) * s.dz};
}

struct PreparedSample {
  const MeasureSample* sample;
  std::map<OrganId, Box3D> boxes;
};

}  // namespace

MeasureTrainResult train_measurement(const std::vector<MeasureSample>& data,
                                     const MeasureNetConfig& net_cfg,
                                     const MeasureTrainConfig& cfg, std::uint64_t seed,
                                     const std::function<void(const MeasureLogRow&)>& on_epoch) {
  net_cfg.validate();
  cfg.validate();
  if (data.empty()) throw ParameterError("measurement training set is empty");

  std::vector<PreparedSample> prepared;
  for (const auto& s : data) {
    if (s.labels.geometry() != s.image.geometry()) {
      throw ShapeError("measurement sample " + s.id + ": labels and image geometry differ");
    }
    PreparedSample p{&s, {}};
    for (OrganId organ : kAllOrgans) {
      if (auto b = bounding_box_of(s.labels, organ)) p.boxes[organ] = *b;
    }
    prepared.push_back(std::move(p));
  }

  const Rng root(seed);
  Rng init_rng = root.split("measure.init");
  Rng sample_rng = root.split("measure.sample");
  Rng drop_rng = root.split("measure.dropout");

  MeasureTrainResult result;
  MeasureNet<float> net(net_cfg);
  net.init(init_rng);
  nn::Adam<float> backbone_opt(net.backbone_params(), cfg.adam);
  std::vector<nn::Adam<float>> head_opts;
  for (int k = 0; k < kNumOrganClasses; ++k) head_opts.emplace_back(net.head_params(organ_of_class(k)), cfg.adam);

  const Dims P = net_cfg.patch;
  const Dims F = net_cfg.feature_dims();
  const int B = cfg.batch_size;
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    MeasureLogRow row;
    row.epoch = epoch;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      Tensor<float> x(Shape{B, 1, P.nx, P.ny, P.nz});
      std::vector<AnchorTargets> targets;
      struct RoiItem {
        int item;
        Box3D box;  // patch voxel coordinates
        std::vector<double> target;
        Spacing spacing;
      };
      std::map<OrganId, std::vector<RoiItem>> rois;
      for (int b = 0; b < B; ++b) {
        const PreparedSample& ps = prepared[sample_rng.below(prepared.size())];
        const MeasureSample& smp = *ps.sample;
        const auto corners = measurement_corners(smp.image.dims(), P);
        Index3 corner = corners[sample_rng.below(corners.size())];
        if (!ps.boxes.empty()) {
          auto it = ps.boxes.begin();
          std::advance(it, static_cast<long>(sample_rng.below(ps.boxes.size())));
          // Any offset that keeps the organ whole, not just the inference grid.
          const Dims& D = smp.image.dims();
          bool fits = true;
          Index3 lo, hi;
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::max(0, it->second.hi()[a] - P[a]);
            hi[a] = std::min(it->second.lo()[a], std::max(0, D[a] - P[a]));
            if (hi[a] < lo[a]) fits = false;
          }
          if (fits) {
            for (int a = 0; a < 3; ++a) corner[a] = sample_rng.uniform_int(lo[a], hi[a]);
          }
        }
        const VoxelGrid img = prep::extract_patch(smp.image, corner, P);
        std::copy(img.values().begin(), img.values().end(), x.channel(b, 0));

        std::vector<GtBox> gt;
        std::vector<BoxF> ignore;
        for (const auto& [organ, box] : ps.boxes) {
          const Box3D local = shift(box, corner, -1);
          if (box_inside(box, corner, P)) {
            gt.push_back({organ, BoxF::from(local)});
            const auto tit = smp.truth.find(organ);
            if (tit == smp.truth.end()) continue;
            std::vector<double> target;
            bool complete = true;
            for (Quantity q : quantities_for(organ)) {
              const auto v = tit->second.get(q);
              if (!v) complete = false;
              else target.push_back(*v / normalization_scale(q));
            }
            if (!complete) continue;
            Index3 lo = local.lo(), hi = local.hi();
            for (int a = 0; a < 3; ++a) {
              lo[a] += sample_rng.uniform_int(-cfg.box_jitter, cfg.box_jitter);
              hi[a] += sample_rng.uniform_int(-cfg.box_jitter, cfg.box_jitter);
              lo[a] = std::clamp(lo[a], 0, P[a] - 1);
              hi[a] = std::clamp(hi[a], lo[a] + 1, P[a]);
            }
            rois[organ].push_back({b, Box3D(lo, hi), std::move(target), smp.image.spacing()});
          } else if (auto part = intersect(local, P)) {
            ignore.push_back(BoxF::from(*part));
          }
        }
        const auto anchors = generate_anchors(F, net_cfg.anchor_sizes(smp.image.spacing()),
                                              net_cfg.feature_stride());
        targets.push_back(assign_anchors(anchors, gt, ignore, net_cfg.positive_iou, net_cfg.negative_iou));
      }

      const double lr = nn::schedule_lr(cfg.backbone_schedule, epoch, s, cfg.steps_per_epoch);
      backbone_opt.zero_grad();
      for (auto& o : head_opts) o.zero_grad();
      const auto fwd = net.forward(x, Mode::Train);
      Tensor<float> grad_rpn;
      const double l_rpn = rpn_loss(fwd.rpn, targets, &grad_rpn);
      Tensor<float> grad_roi(fwd.roi_features.shape());
      double l_meas = 0.0;
      const Dims RF(fwd.roi_features.shape().x, fwd.roi_features.shape().y, fwd.roi_features.shape().z);
      for (auto& [organ, items] : rois) {
        std::vector<Tensor<float>> pooled;
        std::vector<std::vector<std::size_t>> argmax(items.size());
        std::vector<std::array<double, 3>> ext;
        std::vector<std::vector<double>> tgt;
        for (std::size_t r = 0; r < items.size(); ++r) {
          const Box3D fb = to_feature_box(items[r].box, net_cfg.roi_stride(), RF);
          pooled.push_back(roi_pool(fwd.roi_features, items[r].item, fb, &argmax[r]));
          ext.push_back(extents_mm(items[r].box, items[r].spacing));
          tgt.push_back(items[r].target);
        }
        auto& head = net.head(organ);
        const auto pred = head.forward(head_input(pooled, ext), Mode::Train, drop_rng);
        Tensor<float> gpred;
        l_meas += measurement_loss(pred, tgt, &gpred);
        const auto gin = head.backward(gpred);
        const std::size_t Fp = pooled.front().size();
        for (std::size_t r = 0; r < items.size(); ++r) {
          Tensor<float> gp(pooled[r].shape(),
                           std::vector<float>(gin.data() + r * (Fp + kHeadGeometry),
                                              gin.data() + r * (Fp + kHeadGeometry) + Fp));
          roi_pool_backward(gp, argmax[r], grad_roi);
        }
        head_opts[class_of(organ)].step(
            nn::schedule_lr(cfg.head_schedule(organ), epoch, s, cfg.steps_per_epoch));
      }
      net.backward(grad_rpn, grad_roi);
      backbone_opt.step(lr);
      ++step;
      row.lr_backbone = lr;
      row.rpn_loss += l_rpn / cfg.steps_per_epoch;
      row.measure_loss += l_meas / cfg.steps_per_epoch;
      result.step_losses.push_back(l_rpn + l_meas);
    }
    row.step = step;
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  result.net = std::move(net);
  return result;
}

std::string measure_log_csv(const std::vector<MeasureLogRow>& log) {
  std::string out = "epoch,step,lr_backbone,rpn_loss,measure_loss\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.lr_backbone,
                  r.rpn_loss, r.measure_loss);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------- inference

MeasureResult run_measurement(const VoxelGrid& image, const MeasureNet<float>& net, int threads) {
  const MeasureNetConfig& cfg = net.config();
  const Dims P = cfg.patch;
  const auto corners = measurement_corners(image.dims(), P);
  const auto anchors = generate_anchors(cfg.feature_dims(), cfg.anchor_sizes(image.spacing()),
                                        cfg.feature_stride());
  const int A = cfg.num_anchors_per_cell();
  const std::size_t cells = cfg.feature_dims().count();

  std::vector<MeasureForward<float>> outs(corners.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(corners.size())));
  std::vector<MeasureNet<float>> nets(workers, net);
  std::atomic<std::size_t> next{0};
  auto work = [&](int w) {
    for (std::size_t k = next++; k < corners.size(); k = next++) {
      outs[k] = nets[w].forward(grid_tensor(prep::extract_patch(image, corners[k], P)), Mode::Eval);
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }

  struct Candidate {
    std::size_t patch;
    BoxF local;
    bool truncated;  // touches a patch face that lies inside the volume
  };
  std::vector<Proposal> props;
  std::vector<Candidate> origin;
  for (std::size_t k = 0; k < corners.size(); ++k) {
    const Tensor<float>& o = outs[k].rpn;
    for (std::size_t cell = 0; cell < cells; ++cell) {
      for (int a = 0; a < A; ++a) {
        auto ch = [&](int j) { return static_cast<double>(o.channel(0, a * kAnchorOutputs + j)[cell]); };
        const double obj = nn::sigmoid(ch(0));
        if (obj < cfg.score_threshold) continue;
        Deltas d;
        for (int j = 0; j < 6; ++j) d[j] = ch(1 + j);
        const BoxF local = clip_box(bbox_decode(anchors[cell * A + a], d), P);
        if (local.size(0) < 1.0 || local.size(1) < 1.0 || local.size(2) < 1.0) continue;
        Proposal p;
        p.objectness = obj;
        double mx = -std::numeric_limits<double>::infinity(), z = 0.0;
        for (int c = 0; c < kNumOrganClasses; ++c) mx = std::max(mx, ch(7 + c));
        for (int c = 0; c < kNumOrganClasses; ++c) z += std::exp(ch(7 + c) - mx);
        double top = 0.0;
        for (int c = 0; c < kNumOrganClasses; ++c) {
          p.class_probs[c] = std::exp(ch(7 + c) - mx) / z;
          top = std::max(top, p.class_probs[c]);
        }
        p.score = obj * top;
        for (int ax = 0; ax < 3; ++ax) {
          p.box.lo[ax] = local.lo[ax] + corners[k][ax];
          p.box.hi[ax] = local.hi[ax] + corners[k][ax];
        }
        bool truncated = false;
        for (int ax = 0; ax < 3; ++ax) {
          if (corners[k][ax] > 0 && local.lo[ax] < 0.5) truncated = true;
          if (corners[k][ax] + P[ax] < image.dims()[ax] && local.hi[ax] > P[ax] - 0.5) truncated = true;
        }
        props.push_back(p);
        origin.push_back({k, local, truncated});
      }
    }
  }

  // Whole-organ proposals go through NMS; truncated ones are only a fallback
  // for organs that have nothing else.
  std::vector<Proposal> whole;
  std::vector<std::size_t> whole_index;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (origin[i].truncated) continue;
    whole.push_back(props[i]);
    whole_index.push_back(i);
  }
  MeasureResult result;
  std::vector<std::size_t> keep;
  for (std::size_t j : nms_3d(whole, cfg.nms_iou)) keep.push_back(whole_index[j]);
  for (std::size_t i : keep) result.proposals.push_back(props[i]);
  std::vector<std::size_t> fallback;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (origin[i].truncated) fallback.push_back(i);
  }

  MeasureNet<float> measurer = net;
  Rng unused(0);
  for (int c = 0; c < kNumOrganClasses; ++c) {
    const OrganId organ = organ_of_class(c);
    auto pick = [&](const std::vector<std::size_t>& pool) {
      std::size_t best = props.size();
      double best_score = -1.0;
      for (std::size_t i : pool) {
        const auto& p = props[i];
        const int top = static_cast<int>(std::max_element(p.class_probs.begin(), p.class_probs.end()) -
                                         p.class_probs.begin());
        if (top != c) continue;
        const double sc = p.objectness * p.class_probs[c];
        if (sc > best_score || (sc == best_score && i < best)) {
          best_score = sc;
          best = i;
        }
      }
      return best;
    };
    std::size_t best = pick(keep);
    if (best == props.size()) best = pick(fallback);
    if (best == props.size()) continue;
    const Proposal& p = props[best];
    const Candidate& cand = origin[best];
    const Box3D local = cand.local.rounded();
    const Tensor<float>& feats = outs[cand.patch].roi_features;
    const Dims RF(feats.shape().x, feats.shape().y, feats.shape().z);
    const auto pooled = roi_pool(feats, 0, to_feature_box(local, cfg.roi_stride(), RF));
    const auto pred = measurer.head(organ).forward(
        head_input(std::vector<Tensor<float>>{pooled},
                   std::vector<std::array<double, 3>>{extents_mm(local, image.spacing())}),
        Mode::Eval, unused);
    Detection det;
    det.organ = organ;
    det.box = p.box;
    det.voxel_box = shift(local, corners[cand.patch], 1);
    det.objectness = p.objectness;
    det.class_prob = p.class_probs[c];
    const auto& qs = quantities_for(organ);
    for (std::size_t q = 0; q < qs.size(); ++q) {
      det.values.set(qs[q], std::max(0.0, static_cast<double>(pred[q])) * normalization_scale(qs[q]));
    }
    result.detections[organ] = det;
  }
  return result;
}

// ---------------------------------------------------------------- persistence

void save_measurement(const std::filesystem::path& stem, MeasureNet<float>& net, int epoch,
                      const MeasureTrainConfig& train_cfg) {
  nn::CheckpointMeta meta;
  meta.model = kMeasureModelName;
  meta.epoch = epoch;
  meta.schedule = train_cfg.to_json();
  meta.config = net.config().to_json();
  nn::save_checkpoint(stem, net.params(), meta);
}

MeasureNet<float> load_measurement(const std::filesystem::path& stem,
                                   const std::optional<MeasureNetConfig>& expected) {
  const nn::CheckpointMeta meta = nn::read_checkpoint_meta(stem);
  MeasureNetConfig cfg;
  try {
    cfg = MeasureNetConfig::from_json(meta.config);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("measurement checkpoint config: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw FormatError("measurement checkpoint was trained with a different network config");
  }
  MeasureNet<float> net(cfg);
  auto set = net.params();
  nn::load_checkpoint(stem, set, kMeasureModelName);
  return net;
}

}  // namespace ctm::rpn
