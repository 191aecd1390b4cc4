#include <gtest/gtest.h>

#include <cmath>

#include "ctm/nn/losses.hpp"
#include "ctm/segnet.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

namespace ctm::seg {
namespace {

using nn::Mode;
using nn::Shape;
using nn::Tensor;
using testing::check_entries;
using testing::dot;
using testing::random_tensor;

// Independent parameter-count oracle: walks the node grid from the
// architecture description rather than from the built network.
std::size_t expected_param_count(const SegNetConfig& c) {
  auto ch = [&](int i) { return std::min(c.base_channels << i, c.max_channels); };
  auto block = [](std::size_t cin, std::size_t cout) {
    return 27 * cin * cout + cout + 2 * cout + 27 * cout * cout + cout + 2 * cout;
  };
  std::size_t total = 0;
  for (int i = 0; i < c.depth; ++i) total += block(i == 0 ? 1 : ch(i - 1), ch(i));
  for (int j = 1; j < c.depth; ++j)
    for (int i = 0; i + j < c.depth; ++i) total += block(j * ch(i) + ch(i + 1), ch(i));
  const std::size_t heads = c.deep_supervision ? c.depth - 1 : 1;
  return total + heads * (ch(0) * 6 + 6);
}

LabelTensor labels_from(const Shape& s, const std::vector<std::uint8_t>& v) {
  return LabelTensor(Shape{s.n, 1, s.x, s.y, s.z}, v);
}

TEST(SegConfig, ChannelDoublingAndCap) {
  SegNetConfig c;
  EXPECT_EQ(c.channels(0), 8);
  EXPECT_EQ(c.channels(1), 16);
  EXPECT_EQ(c.channels(2), 32);
  c.depth = 4;
  c.base_channels = 32;
  EXPECT_EQ(c.channels(0), 32);
  EXPECT_EQ(c.channels(3), 256);
  c.depth = 5;
  EXPECT_EQ(c.channels(4), 256);
}

TEST(SegConfig, RejectsBadWeightsAndUnknownKeys) {
  SegNetConfig c;
  c.w_dice = 0.7;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(SegNetConfig::from_json({{"depht", 3}}), ConfigError);
  const SegNetConfig back = SegNetConfig::from_json(SegNetConfig{}.to_json());
  EXPECT_EQ(back, SegNetConfig{});
}

TEST(UNetPP, ParameterCountMatchesOracle) {
  for (const auto& [depth, base, ds] : std::vector<std::tuple<int, int, bool>>{
           {3, 8, true}, {4, 32, true}, {2, 4, false}, {5, 32, true}}) {
    SegNetConfig c;
    c.depth = depth;
    c.base_channels = base;
    c.deep_supervision = ds;
    UNetPP<float> net(c);
    EXPECT_EQ(net.params().parameter_count(), expected_param_count(c)) << depth << " " << base;
  }
}

TEST(UNetPP, ForwardShapesAndHeads) {
  SegNetConfig c;
  UNetPP<float> net(c);
  Rng rng(1);
  net.init(rng);
  Tensor<float> x(Shape{2, 1, 8, 8, 8});
  const auto train = net.forward(x, Mode::Train);
  EXPECT_EQ(train.size(), 2u);
  for (const auto& t : train) EXPECT_EQ(t.shape(), (Shape{2, 6, 8, 8, 8}));
  EXPECT_EQ(net.forward(x, Mode::Eval).size(), 1u);
  EXPECT_THROW(net.forward(Tensor<float>(Shape{1, 1, 6, 8, 8}), Mode::Eval), ShapeError);
}

TEST(UNetPP, GradientsMatchFiniteDifferences) {
  SegNetConfig c;
  c.depth = 3;
  c.base_channels = 2;
  UNetPP<double> net(c);
  Rng rng(2);
  net.init(rng);
  auto x = random_tensor(Shape{2, 1, 4, 4, 4}, rng);
  std::vector<Tensor<double>> r;
  for (int d = 0; d < net.num_heads(); ++d) r.push_back(random_tensor(Shape{2, 6, 4, 4, 4}, rng));
  auto set = net.params();
  set.zero_grad();
  net.forward(x, Mode::Train);
  net.backward(r);
  auto loss = [&] {
    const auto out = net.forward(x, Mode::Train);
    double s = 0.0;
    for (std::size_t d = 0; d < out.size(); ++d) s += dot(out[d], r[d]);
    return s;
  };
  // Small step: the composite has many ReLU/maxpool kinks.
  int checked = 0;
  for (auto& p : set.params) {
    const Tensor<double> g = p.param->grad();
    if (p.name.ends_with("conv1.bias") || p.name.ends_with("conv2.bias")) {
      // A per-channel shift ahead of train-mode batchnorm cancels exactly.
      for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], 0.0, 1e-9) << p.name;
      continue;
    }
    const auto res = check_entries(p.param->value(), g, loss, rng, 2, 1e-6);
    EXPECT_LE(res.worst, 1e-4) << p.name;
    checked += res.probes;
  }
  EXPECT_GE(checked, 20);
}

TEST(SoftDice, PerfectAndDisjoint) {
  const Shape s{1, 6, 4, 1, 1};
  const auto t = labels_from(s, {0, 1, 2, 1});
  Tensor<double> onehot(s);
  for (int i = 0; i < 4; ++i) onehot.at(0, t[i], i, 0, 0) = 1.0;
  EXPECT_LE(soft_dice_loss(onehot, t), 1e-4);
  Tensor<double> wrong(s);
  for (int i = 0; i < 4; ++i) wrong.at(0, t[i] == 1 ? 2 : 1, i, 0, 0) = 1.0;
  EXPECT_GE(soft_dice_loss(wrong, t), 1.0 - 1e-4);
}

TEST(SoftDice, HandComputedHalfOverlap) {
  // Class 1 only: p = [1,1,0,0], g = [1,0,1,0]; dice = 2*1/(2+2) = 0.5.
  const Shape s{1, 6, 4, 1, 1};
  const auto t = labels_from(s, {1, 0, 1, 0});
  Tensor<double> p(s);
  p.at(0, 1, 0, 0, 0) = 1.0;
  p.at(0, 1, 1, 0, 0) = 1.0;
  p.at(0, 0, 2, 0, 0) = 1.0;
  p.at(0, 0, 3, 0, 0) = 1.0;
  EXPECT_NEAR(soft_dice_loss(p, t), 0.5, 1e-5);
}

TEST(SoftDice, NoForegroundGivesZero) {
  const Shape s{1, 6, 2, 1, 1};
  Tensor<double> p(s, 1.0 / 6);
  EXPECT_EQ(soft_dice_loss(p, labels_from(s, {0, 0})), 0.0);
}

TEST(SoftDice, BoundedForProbabilityInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s{2, 6, 3, 3, 2};
    const auto p = nn::softmax_channels(random_tensor(s, rng, 3.0));
    std::vector<std::uint8_t> lab(2 * 18);
    for (auto& v : lab) v = static_cast<std::uint8_t>(rng.below(6));
    const double l = soft_dice_loss(p, labels_from(s, lab));
    EXPECT_GE(l, -1e-5);
    EXPECT_LE(l, 1.0 + 1e-5);
  }
}

TEST(CombinedLoss, UniformProbabilities) {
  const Shape s{1, 6, 4, 1, 1};
  const auto t = labels_from(s, {1, 2, 0, 3});
  std::vector<Tensor<double>> logits{Tensor<double>(s, 0.0)};
  SegNetConfig c;
  const double ce = cross_entropy_loss(logits[0], t);
  EXPECT_NEAR(ce, std::log(6.0), 1e-12);
  // Each present class: Σp = 4/6, Σg = 1, Σpg = 1/6.
  const double dice_c = 1.0 - (2.0 / 6 + kDiceSmooth) / (4.0 / 6 + 1.0 + kDiceSmooth);
  EXPECT_NEAR(combined_loss(logits, t, c), 0.6 * dice_c + 0.4 * 1.791759469228055, 1e-9);
}

TEST(CombinedLoss, PerfectPredictionNearZero) {
  const Shape s{1, 6, 5, 1, 1};
  const auto t = labels_from(s, {0, 1, 2, 4, 5});
  Tensor<double> z(s, -10.0);
  for (int i = 0; i < 5; ++i) z.at(0, t[i], i, 0, 0) = 10.0;
  SegNetConfig c;
  const double l = combined_loss(std::vector<Tensor<double>>{z}, t, c);
  EXPECT_LT(l, 1e-3);
  EXPECT_GE(l, 0.0);
}

TEST(CombinedLoss, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  const Shape s{2, 6, 3, 2, 2};
  std::vector<std::uint8_t> lab(24);
  for (auto& v : lab) v = static_cast<std::uint8_t>(rng.below(6));
  const auto t = labels_from(s, lab);
  std::vector<Tensor<double>> z{random_tensor(s, rng), random_tensor(s, rng)};
  SegNetConfig c;
  std::vector<Tensor<double>> g;
  combined_loss(z, t, c, &g);
  for (int d = 0; d < 2; ++d) {
    auto loss = [&] { return combined_loss(z, t, c); };
    EXPECT_LE(check_entries(z[d], g[d], loss, rng).worst, 1e-4);
  }
}

TEST(CombinedLoss, CoarseHeadUsesDownsampledTarget) {
  const Shape fine{1, 6, 4, 2, 2};
  std::vector<std::uint8_t> lab(16, 0);
  lab[0] = 3;
  const auto t = labels_from(fine, lab);
  const auto coarse = downsample_labels(t, 2, 1, 1);
  EXPECT_EQ(coarse[0], 3);
  EXPECT_EQ(coarse[1], 0);
  std::vector<Tensor<double>> z{Tensor<double>(fine), Tensor<double>(Shape{1, 6, 2, 1, 1})};
  EXPECT_NO_THROW(combined_loss(z, t, SegNetConfig{}));
}

TEST(CombinedLoss, HeadWeightsSumToOne) {
  for (int h = 1; h <= 6; ++h) {
    const auto w = head_weights(h);
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_DOUBLE_EQ(s, 1.0);
    for (int d = 1; d < h; ++d) EXPECT_DOUBLE_EQ(w[d], w[0] * std::ldexp(1.0, -d));
  }
}

VoxelGrid random_image(const Dims& d, Rng& rng) {
  GridGeometry g;
  g.dims = d;
  g.spacing = Spacing(3, 3, 3);
  std::vector<float> v(d.count());
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return VoxelGrid(g, std::move(v));
}

TEST(Predict, ProbabilitiesSumToOneAndLabelsValid) {
  Rng rng(5);
  SegNetConfig c;
  c.base_channels = 2;
  UNetPP<float> net(c);
  net.init(rng);
  const auto img = random_image(Dims(20, 16, 12), rng);
  const auto pred = predict_segmentation(img, net, prep::PatchSpec(Dims(8, 8, 8), Dims(4, 4, 4)), 3);
  ASSERT_EQ(pred.probabilities.size(), 6u);
  for (std::size_t i = 0; i < img.size(); ++i) {
    double s = 0.0;
    for (const auto& p : pred.probabilities) {
      EXPECT_GE(p[i], 0.0f);
      s += p[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
    EXPECT_LE(pred.labels[i], 5);
  }
}

TEST(Predict, SinglePatchEqualsDirectForward) {
  Rng rng(6);
  SegNetConfig c;
  c.base_channels = 2;
  UNetPP<float> net(c);
  net.init(rng);
  const Dims d(8, 16, 8);
  const auto img = random_image(d, rng);
  const auto pred = predict_segmentation(img, net, prep::PatchSpec(d, d));
  UNetPP<float> copy = net;
  const auto direct = nn::softmax_channels(
      copy.forward(Tensor<float>(Shape{1, 1, 8, 16, 8}, img.values()), Mode::Eval)[0]);
  for (int k = 0; k < 6; ++k)
    for (std::size_t i = 0; i < img.size(); ++i)
      EXPECT_EQ(pred.probabilities[k][i], direct.channel(0, k)[i]);
}

TEST(Predict, ConstantNetworkGivesConstantAfterOverlap) {
  Rng rng(7);
  SegNetConfig c;
  c.base_channels = 2;
  c.deep_supervision = false;
  UNetPP<float> net(c);
  net.init(rng);
  auto set = net.params();
  for (auto& p : set.params) {
    if (p.name == "head0.weight") p.param->value().fill(0.0f);
    if (p.name == "head0.bias") {
      for (int k = 0; k < 6; ++k) p.param->value()[k] = 0.1f * k;
    }
  }
  const auto img = random_image(Dims(24, 16, 16), rng);
  const auto pred = predict_segmentation(img, net, prep::PatchSpec(Dims(16, 8, 8), Dims(4, 4, 4)), 2);
  Tensor<double> z(Shape{1, 6, 1, 1, 1});
  for (int k = 0; k < 6; ++k) z[k] = 0.1f * k;
  const auto p = nn::softmax_channels(z);
  for (int k = 0; k < 6; ++k)
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(pred.probabilities[k][i], p[k], 1e-6);
}

TEST(Predict, ThreadCountDoesNotChangeResult) {
  Rng rng(8);
  SegNetConfig c;
  c.base_channels = 2;
  UNetPP<float> net(c);
  net.init(rng);
  const auto img = random_image(Dims(16, 16, 16), rng);
  const prep::PatchSpec ps(Dims(8, 8, 8), Dims(4, 4, 4));
  const auto a = predict_segmentation(img, net, ps, 1);
  const auto b = predict_segmentation(img, net, ps, 4);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(a.probabilities[k].values(), b.probabilities[k].values());
  EXPECT_EQ(a.labels, b.labels);
}

// Bright cubes labelled as organs on a noisy background.
std::vector<SegSample> toy_dataset(int count, Rng& rng) {
  std::vector<SegSample> out;
  const Dims d(16, 16, 16);
  for (int n = 0; n < count; ++n) {
    auto img = random_image(d, rng);
    GridGeometry g = img.geometry();
    std::vector<std::uint8_t> lab(d.count(), 0);
    const int label = 1 + static_cast<int>(rng.below(5));
    const int x0 = rng.uniform_int(1, 8), y0 = rng.uniform_int(1, 8), z0 = rng.uniform_int(1, 8);
    for (int z = z0; z < z0 + 6; ++z)
      for (int y = y0; y < y0 + 6; ++y)
        for (int x = x0; x < x0 + 6; ++x) {
          lab[d.index(x, y, z)] = static_cast<std::uint8_t>(label);
          img.at(x, y, z) += 1.0f + 0.5f * label;
        }
    out.push_back({"toy" + std::to_string(n), img, LabelMask(g, std::move(lab))});
  }
  return out;
}

SegTrainConfig toy_train_config() {
  SegTrainConfig t;
  t.epochs = 3;
  t.steps_per_epoch = 12;
  t.batch_size = 2;
  t.train_patch = Dims(16, 16, 16);
  t.infer_patch = prep::PatchSpec(Dims(16, 16, 16), Dims(8, 8, 8));
  return t;
}

TEST(Train, LossDecreasesAndRunsAreBitIdentical) {
  Rng rng(9);
  const auto data = toy_dataset(10, rng);
  SegNetConfig c;
  c.base_channels = 4;
  const auto cfg = toy_train_config();
  auto a = train_segmentation(data, c, cfg, 42);
  auto b = train_segmentation(data, c, cfg, 42);
  ASSERT_EQ(a.step_losses.size(), 36u);
  double first = 0, last = 0;
  for (int i = 0; i < 6; ++i) {
    first += a.step_losses[i];
    last += a.step_losses[a.step_losses.size() - 1 - i];
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(a.step_losses, b.step_losses);
  auto pa = a.net.params();
  auto pb = b.net.params();
  for (std::size_t k = 0; k < pa.params.size(); ++k) {
    EXPECT_EQ(pa.params[k].param->value().vec(), pb.params[k].param->value().vec());
  }
  EXPECT_EQ(a.log.size(), 3u);
  EXPECT_DOUBLE_EQ(a.log.front().lr, nn::schedule_lr(cfg.effective_schedule(), 0, 11, 12));
  EXPECT_DOUBLE_EQ(nn::schedule_lr(cfg.effective_schedule(), 0.0), 0.01);
  EXPECT_NE(log_csv(a.log).find("epoch,step,lr,loss,val_dice\n"), std::string::npos);
}

TEST(Train, RejectsEmptyDataAndBadPatch) {
  SegNetConfig c;
  EXPECT_THROW(train_segmentation({}, c, toy_train_config(), 1), ParameterError);
  Rng rng(10);
  const auto data = toy_dataset(2, rng);
  auto cfg = toy_train_config();
  cfg.train_patch = Dims(12, 16, 16);
  EXPECT_THROW(train_segmentation(data, c, cfg, 1), ConfigError);
}

TEST(Train, ValidationSplitIsStableAndNearFraction) {
  int held = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string id = "case" + std::to_string(i);
    const bool v = in_validation_split(id, 7, 0.2);
    EXPECT_EQ(v, in_validation_split(id, 7, 0.2));
    held += v;
  }
  EXPECT_NEAR(held / 1000.0, 0.2, 0.04);
  EXPECT_FALSE(in_validation_split("x", 7, 0.0));
}

TEST(Checkpoint, SegmentationRoundTripAndConfigMismatch) {
  testing::TempDir dir;
  Rng rng(11);
  SegNetConfig c;
  c.base_channels = 2;
  UNetPP<float> net(c);
  net.init(rng);
  save_segmentation(dir.path() / "seg", net, 4, nn::CosineAnnealing{0.01, 5, 0});
  UNetPP<float> back = load_segmentation(dir.path() / "seg", c);
  auto a = net.params();
  auto b = back.params();
  for (std::size_t k = 0; k < a.params.size(); ++k) {
    EXPECT_EQ(a.params[k].param->value().vec(), b.params[k].param->value().vec());
  }
  SegNetConfig other = c;
  other.base_channels = 4;
  EXPECT_THROW(load_segmentation(dir.path() / "seg", other), FormatError);
}

}  // namespace
}  // namespace ctm::seg
