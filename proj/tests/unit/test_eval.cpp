#include <gtest/gtest.h>

#include <cmath>

#include "ctm/eval.hpp"
#include "ctm/io.hpp"
#include "ctm/rng.hpp"
#include "test_util.hpp"

namespace ctm::eval {
namespace {

LabelMask line_mask(const std::vector<std::uint8_t>& v) {
  GridGeometry g;
  g.dims = Dims(static_cast<int>(v.size()), 1, 1);
  return LabelMask(g, v);
}

/// Probability that a random positive outscores a random negative, ties ½.
double pairwise_auc(const std::vector<float>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

TEST(PrecisionRecall, Perfect) {
  const auto m = line_mask({0, 1, 1, 2, 0});
  const auto pr = precision_recall(m, m, OrganId::Liver);
  EXPECT_EQ(*pr.precision, 1.0);
  EXPECT_EQ(*pr.recall, 1.0);
}

TEST(PrecisionRecall, CountingExample) {
  // pred 10 voxels, truth 8, overlap 7.
  std::vector<std::uint8_t> p(20, 0), t(20, 0);
  for (int i = 0; i < 10; ++i) p[i] = 3;
  for (int i = 3; i < 11; ++i) t[i] = 3;
  const auto pr = precision_recall(line_mask(p), line_mask(t), OrganId::LeftKidney);
  EXPECT_DOUBLE_EQ(*pr.precision, 0.7);
  EXPECT_DOUBLE_EQ(*pr.recall, 0.875);
}

TEST(PrecisionRecall, EmptyPredictionAndMismatch) {
  const auto pr = precision_recall(line_mask({0, 0, 0}), line_mask({0, 4, 0}), OrganId::Spleen);
  EXPECT_FALSE(pr.precision);
  EXPECT_EQ(*pr.recall, 0.0);
  EXPECT_THROW(precision_recall(line_mask({0, 0}), line_mask({0, 0, 0}), OrganId::Spleen),
               ShapeError);
}

TEST(PrecisionRecall, BothOneIffIdentical) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> a(6), b(6);
    for (auto& v : a) v = rng.below(2) ? 1 : 0;
    for (auto& v : b) v = rng.below(2) ? 1 : 0;
    const auto pr = precision_recall(line_mask(a), line_mask(b), OrganId::Liver);
    const bool ones = pr.precision && pr.recall && *pr.precision == 1.0 && *pr.recall == 1.0;
    const bool nonempty = std::count(a.begin(), a.end(), 1) > 0;
    EXPECT_EQ(ones, a == b && nonempty);
  }
}

TEST(Roc, PerfectSeparation) {
  const std::vector<float> s{0.9f, 0.8f, 0.1f, 0.2f};
  const std::vector<std::uint8_t> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(*roc_auc(s, y).auc, 1.0);
}

TEST(Roc, ThreeOfFourPairs) {
  const std::vector<float> s{0.8f, 0.4f, 0.6f, 0.2f};
  const std::vector<std::uint8_t> y{1, 1, 0, 0};
  EXPECT_DOUBLE_EQ(*roc_auc(s, y).auc, 0.75);
  EXPECT_DOUBLE_EQ(pairwise_auc(s, y), 0.75);
}

TEST(Roc, AllEqualIsHalf) {
  const std::vector<float> s(7, 0.3f);
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 0, 1, 1};
  const auto r = roc_auc(s, y);
  EXPECT_DOUBLE_EQ(*r.auc, 0.5);
}

TEST(Roc, SingleClassHasNoAuc) {
  const std::vector<float> s{0.1f, 0.2f};
  EXPECT_FALSE(roc_auc(s, std::vector<std::uint8_t>{1, 1}).auc);
  EXPECT_FALSE(roc_auc(s, std::vector<std::uint8_t>{0, 0}).auc);
}

TEST(Roc, TrapezoidMatchesPairwiseEstimator) {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<float> s(n);
    std::vector<std::uint8_t> y(n);
    const int levels = rng.uniform_int(2, 40);  // coarse scores force ties
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform() < 0.4;
      s[i] = static_cast<float>(rng.uniform_int(0, levels)) / static_cast<float>(levels);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(*roc_auc(s, y).auc, pairwise_auc(s, y), 1e-9);
  }
}

TEST(Roc, EndpointsMonotoneAndThinned) {
  Rng rng(33);
  std::vector<float> s(5000);
  std::vector<std::uint8_t> y(5000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    y[i] = rng.uniform() < 0.3;
    s[i] = static_cast<float>(std::clamp(0.5 + 0.3 * (y[i] ? 1 : -1) + 0.3 * rng.normal(), 0.0, 1.0));
  }
  const auto r = roc_auc(s, y);
  ASSERT_LE(r.points.size(), kMaxRocPoints);
  EXPECT_EQ(r.points.front().fpr, 0.0);
  EXPECT_EQ(r.points.front().tpr, 0.0);
  EXPECT_EQ(r.points.back().fpr, 1.0);
  EXPECT_EQ(r.points.back().tpr, 1.0);
  EXPECT_TRUE(std::isinf(r.points.front().threshold));
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
    EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    EXPECT_LT(r.points[i].threshold, r.points[i - 1].threshold);
    EXPECT_GE(r.points[i].fpr, 0.0);
    EXPECT_LE(r.points[i].tpr, 1.0);
  }
}

TEST(Mse, Arithmetic) {
  const std::vector<double> ones{1.0, 1.0};
  EXPECT_EQ(*measurement_mse(std::vector<double>{1, 2}, std::vector<double>{1, 2}, ones), 0.0);
  EXPECT_DOUBLE_EQ(*measurement_mse(std::vector<double>{1, 2}, std::vector<double>{1, 3}, ones), 0.5);
  EXPECT_DOUBLE_EQ(*measurement_mse(std::vector<double>{2, 1}, std::vector<double>{3, 1}, ones), 0.5);
  EXPECT_DOUBLE_EQ(*measurement_mse(std::vector<double>{100}, std::vector<double>{300},
                                    std::vector<double>{200}), 1.0);
  EXPECT_FALSE(measurement_mse({}, {}, {}));
  EXPECT_THROW(measurement_mse(std::vector<double>{1}, std::vector<double>{}, ones), ParameterError);
}

MeasurementReport sample_report() {
  MeasurementReport r;
  r.config_digest = "abc123";
  r.seed = 7;
  Rng rng(34);
  // Deliberately out of table order.
  for (OrganId organ : kAllOrgans) {
    OrganReport o;
    o.organ = organ;
    o.metrics.precision = rng.uniform();
    o.metrics.recall = rng.uniform();
    std::vector<float> s(300);
    std::vector<std::uint8_t> y(300);
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = static_cast<float>(rng.uniform());
      y[i] = rng.uniform() < 0.5;
    }
    const auto roc = roc_auc(s, y);
    o.metrics.auc = roc.auc;
    o.roc = roc.points;
    CaseMeasurement c;
    c.id = "case_000";
    c.geometric.values.set(Quantity::VolumeCc, rng.uniform(10, 100));
    o.cases.push_back(c);
    r.organs.push_back(o);
  }
  return r;
}

TEST(Report, TableOrderAndKeys) {
  const auto j = sample_report().to_json();
  ASSERT_EQ(j["organs"].size(), 5u);
  const std::vector<std::string> expected{"RightKidney", "LeftKidney", "Liver", "Spleen", "Prostate"};
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& o = j["organs"][i];
    EXPECT_EQ(o["organ"], expected[i]);
    for (const char* key : {"precision", "recall", "auc", "mse", "measurements_geometric",
                            "measurements_learned"}) {
      EXPECT_TRUE(o.contains(key)) << key;
    }
  }
}

TEST(Report, DuplicateOrganRejected) {
  auto r = sample_report();
  r.organs.push_back(r.organs.front());
  EXPECT_THROW(r.to_json(), ValidationError);
}

TEST(Report, EmissionIsByteIdenticalAndRocRoundTrips) {
  testing::TempDir a, b;
  const auto r = sample_report();
  emit_report(r, a.path());
  emit_report(r, b.path());
  EXPECT_EQ(io::read_binary_file(a.path() / "report.json"), io::read_binary_file(b.path() / "report.json"));
  EXPECT_EQ(io::read_binary_file(a.path() / "roc.csv"), io::read_binary_file(b.path() / "roc.csv"));

  const auto rows = parse_roc_csv(io::read_text_file(a.path() / "roc.csv"));
  std::size_t k = 0;
  for (OrganId organ : kReportOrder) {
    const auto& o = *std::find_if(r.organs.begin(), r.organs.end(),
                                  [&](const OrganReport& x) { return x.organ == organ; });
    for (const auto& p : o.roc) {
      ASSERT_LT(k, rows.size());
      EXPECT_EQ(rows[k].organ, organ);
      EXPECT_EQ(rows[k].point, p);
      ++k;
    }
  }
  EXPECT_EQ(k, rows.size());
}

TEST(Report, BadRocCsvRejected) {
  EXPECT_THROW(parse_roc_csv("organ,x\n"), FormatError);
  EXPECT_THROW(parse_roc_csv("organ,threshold,fpr,tpr\nLiver,1,2\n"), FormatError);
  EXPECT_THROW(parse_roc_csv("organ,threshold,fpr,tpr\nLiver,a,0,0\n"), FormatError);
}

}  // namespace
}  // namespace ctm::eval
