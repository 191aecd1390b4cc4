#pragma once

// Region-proposal measurement network: a four-block convolutional backbone,
// an anchor-based proposal head with box regression, ROI max pooling and
// per-organ fully connected measurement heads.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"
#include "ctm/measurements.hpp"
#include "ctm/nn/layers.hpp"
#include "ctm/nn/optim.hpp"

namespace ctm::rpn {

inline constexpr int kNumOrganClasses = 5;
inline constexpr int kAnchorOutputs = 1 + 6 + kNumOrganClasses;  // objectness, deltas, classes
inline constexpr int kBackboneBlocks = 4;
inline constexpr std::array<int, 3> kRoiGrid = {4, 4, 2};
inline constexpr int kHeadGeometry = 4;  // box extents plus box volume

/// Organ class index (0-based) used by the classification logits.
inline int class_of(OrganId organ) { return static_cast<int>(label_of(organ)) - 1; }
inline OrganId organ_of_class(int k) { return organ_from_label(static_cast<std::uint8_t>(k + 1)); }

/// Real-valued axis-aligned box in voxel coordinates; lo inclusive, hi exclusive.
struct BoxF {
  std::array<double, 3> lo{0, 0, 0};
  std::array<double, 3> hi{1, 1, 1};

  static BoxF from(const Box3D& b);
  double size(int a) const { return hi[a] - lo[a]; }
  double center(int a) const { return 0.5 * (lo[a] + hi[a]); }
  double volume() const;
  /// Nearest integer box with at least one voxel per axis.
  Box3D rounded() const;
  bool operator==(const BoxF&) const = default;
};

double iou(const BoxF& a, const BoxF& b);

using Deltas = std::array<double, 6>;  // tcx, tcy, tcz, tsx, tsy, tsz

/// t_c = (c_t - c_a) / s_a, t_s = ln(s_t / s_a). Raises ParameterError on a
/// non-positive extent.
Deltas bbox_encode(const BoxF& anchor, const BoxF& target);
/// Exact inverse of bbox_encode (no clipping).
BoxF bbox_decode(const BoxF& anchor, const Deltas& d);
/// Clips to [0, dims) per axis, keeping a minimal positive extent.
BoxF clip_box(const BoxF& b, const Dims& dims);

/// One anchor per scale centred on each feature cell: center (i + 0.5) * stride,
/// sides `sizes[s]` voxels per axis. Order: cells x-fastest then y, z; scales
/// innermost.
std::vector<BoxF> generate_anchors(const Dims& feature_dims,
                                   const std::vector<std::array<double, 3>>& sizes, int stride);

struct Proposal {
  BoxF box;
  double objectness = 0.0;
  std::array<double, kNumOrganClasses> class_probs{};
  double score = 0.0;  // ranking score used by NMS
};

/// Greedy suppression by descending score, ties to the lower index. Returns
/// the indices kept, in selection order.
std::vector<std::size_t> nms_3d(const std::vector<Proposal>& proposals, double iou_threshold = 0.5);

struct MeasureNetConfig {
  Dims patch{128, 128, 64};
  std::array<int, kBackboneBlocks> channels{16, 32, 64, 128};
  int rpn_channels = 64;
  std::vector<double> anchor_scales_mm{36.0, 54.0, 78.0};
  double positive_iou = 0.5;
  double negative_iou = 0.2;
  double nms_iou = 0.5;
  double score_threshold = 0.5;
  int roi_block = 1;  // backbone block whose output feeds ROI pooling
  int hidden = 128;
  std::map<OrganId, double> dropout{{OrganId::Liver, 0.2}, {OrganId::Prostate, 0.3}};

  void validate() const;
  int feature_stride() const { return 1 << (kBackboneBlocks - 1); }
  int roi_stride() const { return 1 << roi_block; }
  int num_anchors_per_cell() const { return static_cast<int>(anchor_scales_mm.size()); }
  Dims feature_dims() const;
  double dropout_for(OrganId organ) const;
  /// Anchor side lengths in voxels for a given voxel spacing.
  std::vector<std::array<double, 3>> anchor_sizes(const Spacing& spacing) const;
  nlohmann::json to_json() const;
  static MeasureNetConfig from_json(const nlohmann::json& j);
  bool operator==(const MeasureNetConfig&) const = default;
};

/// Max over each cell of a 4x4x2 grid laid over `box` (feature coordinates).
/// Cells span [lo + floor(g E / G), lo + ceil((g + 1) E / G)). `argmax`
/// receives the flat feature index chosen per output entry.
template <class T>
nn::Tensor<T> roi_pool(const nn::Tensor<T>& features, int item, const Box3D& box,
                       std::vector<std::size_t>* argmax = nullptr);

/// Scatters pooled gradients back onto a feature-map gradient.
template <class T>
void roi_pool_backward(const nn::Tensor<T>& grad_pooled, const std::vector<std::size_t>& argmax,
                       nn::Tensor<T>& grad_features);

/// Maps a voxel box to feature cells at `stride`: floor(lo / s), ceil(hi / s), clipped.
Box3D to_feature_box(const Box3D& voxel_box, int stride, const Dims& feature_dims);

/// Fully connected measurement head: Linear(in, hidden), ReLU, Dropout, Linear(hidden, k).
template <class T>
class MeasureHead {
 public:
  MeasureHead() = default;
  MeasureHead(int in_features, int hidden, int outputs, double dropout);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Mode mode, Rng& rng);
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);
  void init(Rng& rng);
  void collect(nn::ParamSet<T>& set, const std::string& prefix);

 private:
  nn::Linear<T> fc1_;
  nn::ReLU<T> relu_;
  nn::Dropout<T> drop_;
  nn::Linear<T> fc2_;
};

/// Raw network outputs for a batch of patches.
template <class T>
struct MeasureForward {
  nn::Tensor<T> rpn;       // (n, A * 12, fx, fy, fz)
  nn::Tensor<T> roi_features;  // output of the ROI block
};

template <class T>
class MeasureNet {
 public:
  MeasureNet() = default;
  explicit MeasureNet(const MeasureNetConfig& cfg);

  const MeasureNetConfig& config() const { return cfg_; }
  void init(Rng& rng);

  /// Input (n, 1, patch). Caches for backward in train mode.
  MeasureForward<T> forward(const nn::Tensor<T>& x, nn::Mode mode);
  /// Gradients w.r.t. the rpn output and the ROI feature map (either may be empty).
  void backward(const nn::Tensor<T>& grad_rpn, const nn::Tensor<T>& grad_roi_features);

  MeasureHead<T>& head(OrganId organ) { return heads_[class_of(organ)]; }
  /// Number of pooled features plus the box geometry inputs.
  int head_inputs() const;

  nn::ParamSet<T> backbone_params();
  nn::ParamSet<T> head_params(OrganId organ);
  /// Backbone + RPN then heads in class order.
  nn::ParamSet<T> params();

 private:
  MeasureNetConfig cfg_;
  std::vector<nn::Conv3d<T>> convs_;
  std::vector<nn::BatchNorm3d<T>> bns_;
  std::vector<nn::ReLU<T>> relus_;
  std::vector<nn::MaxPool3d<T>> pools_;
  nn::Conv3d<T> rpn_conv_;
  nn::ReLU<T> rpn_relu_;
  nn::PointwiseConv<T> rpn_out_;
  std::vector<MeasureHead<T>> heads_;
};

/// Builds the head input (m, F + 4, 1, 1, 1): pooled features, box extents in
/// mm / 200, then the box volume in normalized volume units.
template <class T>
nn::Tensor<T> head_input(const std::vector<nn::Tensor<T>>& pooled,
                         const std::vector<std::array<double, 3>>& extents_mm);

/// Per-anchor training targets for one patch.
struct AnchorTargets {
  std::vector<std::int8_t> label;  // 1 positive, 0 negative, -1 ignored
  std::vector<Deltas> deltas;
  std::vector<int> cls;
};

struct GtBox {
  OrganId organ;
  BoxF box;
};

/// IoU >= positive is positive, < negative is negative, otherwise ignored; the
/// best anchor of each ground-truth box is positive too. Anchors overlapping an
/// `ignore` box by at least `negative` are never negatives. Positives and
/// anchors ignored because of a ground-truth overlap carry box and class
/// targets (`cls >= 0`).
AnchorTargets assign_anchors(const std::vector<BoxF>& anchors, const std::vector<GtBox>& gt,
                             const std::vector<BoxF>& ignore, double positive, double negative);

/// Objectness BCE over labelled anchors, balanced so positives and negatives
/// each carry half the weight, plus smooth-L1 box regression and organ-class
/// cross-entropy averaged over anchors with `cls >= 0`. With no positives the
/// objectness term is the mean negative BCE.
template <class T>
double rpn_loss(const nn::Tensor<T>& rpn_out, const std::vector<AnchorTargets>& targets,
                nn::Tensor<T>* grad = nullptr);

/// Mean squared error over every entry.
template <class T>
double measurement_loss(const nn::Tensor<T>& predicted, const std::vector<std::vector<double>>& targets,
                        nn::Tensor<T>* grad = nullptr);

struct MeasureTrainConfig {
  int epochs = 40;
  int steps_per_epoch = 10;
  int batch_size = 2;
  nn::AdamConfig adam{};
  nn::LrSchedule backbone_schedule = nn::ConstantLr{0.001};
  std::map<OrganId, nn::LrSchedule> head_schedules{
      {OrganId::RightKidney, nn::StepDecay{0.002, 0.8, 15}},
      {OrganId::LeftKidney, nn::StepDecay{0.002, 0.8, 15}},
      {OrganId::Spleen, nn::StepDecay{0.001, 0.8, 15}},
      {OrganId::Liver, nn::ConstantLr{0.001}},
      {OrganId::Prostate, nn::ConstantLr{0.001}}};
  int box_jitter = 1;  // voxels added to or removed from each face of the ROI box

  void validate() const;
  const nn::LrSchedule& head_schedule(OrganId organ) const;
  nlohmann::json to_json() const;
  static MeasureTrainConfig from_json(const nlohmann::json& j);
};

struct MeasureSample {
  std::string id;
  VoxelGrid image;   // preprocessed
  LabelMask labels;  // same geometry as image
  std::map<OrganId, Measurements> truth;
};

struct MeasureLogRow {
  int epoch = 0;
  int step = 0;
  double lr_backbone = 0.0;
  double rpn_loss = 0.0;
  double measure_loss = 0.0;
};

struct MeasureTrainResult {
  MeasureNet<float> net;
  std::vector<MeasureLogRow> log;
  std::vector<double> step_losses;
};

/// Patch corners covering `dims` with half-patch stride.
std::vector<Index3> measurement_corners(const Dims& dims, const Dims& patch);

MeasureTrainResult train_measurement(const std::vector<MeasureSample>& data,
                                     const MeasureNetConfig& net_cfg,
                                     const MeasureTrainConfig& train_cfg, std::uint64_t seed,
                                     const std::function<void(const MeasureLogRow&)>& on_epoch = {});

std::string measure_log_csv(const std::vector<MeasureLogRow>& log);

struct Detection {
  OrganId organ;
  BoxF box;        // volume voxel coordinates
  Box3D voxel_box;
  double objectness = 0.0;
  double class_prob = 0.0;
  Measurements values;
};

struct MeasureResult {
  std::map<OrganId, Detection> detections;  // organs without a proposal are absent
  std::vector<Proposal> proposals;          // after NMS, volume coordinates
};

/// Runs every patch (up to `threads` at a time), pools proposals in corner
/// order, applies NMS and measures the best proposal of each organ. Proposals
/// cut by a patch face inside the volume are used only when an organ has no
/// other candidate.
MeasureResult run_measurement(const VoxelGrid& image, const MeasureNet<float>& net,
                              int threads = 1);

inline constexpr const char* kMeasureModelName = "rcnn3d";

void save_measurement(const std::filesystem::path& stem, MeasureNet<float>& net, int epoch,
                      const MeasureTrainConfig& train_cfg);
MeasureNet<float> load_measurement(const std::filesystem::path& stem,
                                   const std::optional<MeasureNetConfig>& expected = std::nullopt);

}  // namespace ctm::rpn
