#pragma once

// Nested U-Net (U-Net++) segmentation: network, loss, training, and
// sliding-window inference.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"
#include "ctm/nn/layers.hpp"
#include "ctm/nn/optim.hpp"
#include "ctm/preprocess.hpp"

namespace ctm::seg {

inline constexpr int kNumClasses = 6;  // background + five organs
inline constexpr double kDiceSmooth = 1e-5;

struct SegNetConfig {
  int depth = 3;  // resolution levels; level i has base * 2^i channels
  int base_channels = 8;
  int max_channels = 256;
  int num_classes = kNumClasses;
  bool deep_supervision = true;
  double w_dice = 0.6;
  double w_ce = 0.4;

  void validate() const;
  int channels(int level) const;
  nlohmann::json to_json() const;
  static SegNetConfig from_json(const nlohmann::json& j);
  bool operator==(const SegNetConfig&) const = default;
};

struct SegTrainConfig {
  int epochs = 20;
  int steps_per_epoch = 20;
  int batch_size = 2;
  Dims train_patch{64, 64, 32};
  prep::PatchSpec infer_patch{};
  /// Cosine annealing from 0.01 over `epochs` unless overridden.
  std::optional<nn::LrSchedule> schedule;
  nn::AdamConfig adam{};
  /// Fraction of volumes held out, selected by a seed-stable hash of the volume ID.
  double val_fraction = 0.2;
  /// Fraction of training patches centred on a random foreground voxel.
  double foreground_fraction = 0.67;

  void validate() const;
  nn::LrSchedule effective_schedule() const;
  nlohmann::json to_json() const;
  static SegTrainConfig from_json(const nlohmann::json& j);
};

/// Labels shaped (n, 1, x, y, z).
using LabelTensor = nn::Tensor<std::uint8_t>;

/// Two conv3d + batchnorm + ReLU stages.
template <class T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(int in_channels, int out_channels);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, nn::Mode mode);
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);
  void init(Rng& rng);
  void collect(nn::ParamSet<T>& set, const std::string& prefix);

 private:
  nn::Conv3d<T> conv1_;
  nn::BatchNorm3d<T> bn1_;
  nn::ReLU<T> relu1_;
  nn::Conv3d<T> conv2_;
  nn::BatchNorm3d<T> bn2_;
  nn::ReLU<T> relu2_;
};

/// Node X(i, j) exists for i + j <= depth - 1. X(i, 0) is the encoder at level i;
/// X(i, j >= 1) consumes concat(X(i, 0..j-1), up(X(i+1, j-1))). Output heads are
/// 1x1x1 convs on X(0, j), j >= 1; head d (d = 0 is the final output) sits on
/// X(0, depth - 1 - d).
template <class T>
class UNetPP {
 public:
  UNetPP() = default;
  explicit UNetPP(const SegNetConfig& cfg);

  const SegNetConfig& config() const { return cfg_; }
  void init(Rng& rng);

  /// Input (n, 1, x, y, z) with every spatial dim divisible by 2^depth.
  /// Returns logits per head ordered by d; eval mode returns only head 0.
  std::vector<nn::Tensor<T>> forward(const nn::Tensor<T>& x, nn::Mode mode);

  /// Gradients of the loss w.r.t. each head's logits, same order as forward().
  void backward(const std::vector<nn::Tensor<T>>& grad_heads);

  /// Trainable parameters and batchnorm buffers in a fixed declaration order.
  nn::ParamSet<T> params();

  int num_heads() const { return static_cast<int>(heads_.size()); }

 private:
  int node_index(int i, int j) const;

  SegNetConfig cfg_;
  std::vector<ConvBlock<T>> blocks_;  // indexed by node_index
  std::vector<nn::MaxPool3d<T>> pools_;  // pools_[i - 1] feeds X(i, 0)
  std::vector<nn::PointwiseConv<T>> heads_;  // heads_[d]
  std::vector<nn::Tensor<T>> outputs_;
  std::vector<nn::Shape> up_shapes_;  // input shape of the upsample feeding node
};

/// Soft Dice over foreground classes present in the target (Σg > 0), averaged.
/// Sums run over batch and space. Returns 0 when no foreground class is present.
/// If `grad_probs` is non-null it receives dL/dp.
double soft_dice_loss(const nn::Tensor<double>& probs, const LabelTensor& target,
                      nn::Tensor<double>* grad_probs = nullptr);

/// Voxel-mean cross-entropy from logits. If `grad_logits` is non-null it receives dL/dz.
double cross_entropy_loss(const nn::Tensor<double>& logits, const LabelTensor& target,
                          nn::Tensor<double>* grad_logits = nullptr);

/// Normalized 2^-d weights for `heads` deep-supervision heads.
std::vector<double> head_weights(int heads);

/// Nearest-neighbour label downsampling to `dims` (integer ratio per axis).
LabelTensor downsample_labels(const LabelTensor& labels, int x, int y, int z);

/// w_dice * dice + w_ce * CE summed over heads with head_weights(); heads coarser
/// than the target use downsampled labels. Fills `grad_heads` when non-null.
template <class T>
double combined_loss(const std::vector<nn::Tensor<T>>& head_logits, const LabelTensor& target,
                     const SegNetConfig& cfg, std::vector<nn::Tensor<T>>* grad_heads = nullptr);

struct SegSample {
  std::string id;
  VoxelGrid image;  // preprocessed (isotropic, z-scored)
  LabelMask labels;
};

struct SegLogRow {
  int epoch = 0;
  int step = 0;  // global step count at the end of the epoch
  double lr = 0.0;
  double loss = 0.0;  // mean training loss over the epoch
  double val_dice = 0.0;
};

struct SegTrainResult {
  UNetPP<float> net;  // parameters from the best-validation epoch
  int best_epoch = 0;
  double best_val_dice = 0.0;
  std::vector<SegLogRow> log;
  std::vector<double> step_losses;
};

struct SegTrainHooks {
  std::function<void(const SegLogRow&)> on_epoch;
};

/// True when the volume goes to the validation split.
bool in_validation_split(const std::string& id, std::uint64_t seed, double val_fraction);

SegTrainResult train_segmentation(const std::vector<SegSample>& data, const SegNetConfig& net_cfg,
                                  const SegTrainConfig& train_cfg, std::uint64_t seed,
                                  int threads = 1, const SegTrainHooks& hooks = {});

std::string log_csv(const std::vector<SegLogRow>& log);

struct SegPrediction {
  std::vector<VoxelGrid> probabilities;  // one per class
  LabelMask labels;
};

/// Sliding-window inference with uniform overlap averaging. Patches are run on
/// up to `threads` workers and merged in a fixed order.
SegPrediction predict_segmentation(const VoxelGrid& image, const UNetPP<float>& net,
                                   const prep::PatchSpec& patch, int threads = 1);

/// Mean per-organ Dice between two label masks over organs present in `truth`.
double mean_organ_dice(const LabelMask& pred, const LabelMask& truth);

inline constexpr const char* kSegModelName = "unetpp";

void save_segmentation(const std::filesystem::path& stem, UNetPP<float>& net, int epoch,
                       const nn::LrSchedule& schedule);

/// Builds the network from the checkpoint's stored config. If `expected` is
/// given and differs from the stored config, raises FormatError.
UNetPP<float> load_segmentation(const std::filesystem::path& stem,
                                const std::optional<SegNetConfig>& expected = std::nullopt);

}  // namespace ctm::seg
