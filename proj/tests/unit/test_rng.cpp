#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ctm/rng.hpp"

namespace ctm {
namespace {

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, SplitStreamsAreStableAndIndependentOfParentDraws) {
  Rng parent(5);
  const Rng before = parent.split("noise");
  parent.next_u64();
  Rng after = parent.split("noise");
  Rng b2 = before;
  for (int i = 0; i < 10; ++i) EXPECT_EQ(b2.next_u64(), after.next_u64());
  Rng s1 = Rng(5).split("shapes"), s2 = Rng(5).split("noise");
  EXPECT_NE(s1.next_u64(), s2.next_u64());
  EXPECT_NE(Rng(5).split(std::uint64_t{1}).next_u64(), Rng(5).split(std::uint64_t{2}).next_u64());
}

TEST(Rng, UniformRangeAndMean) {
  Rng r(1);
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
  }
  EXPECT_NEAR(s / n, 0.5, 0.005);
}

TEST(Rng, BelowAndUniformIntCoverRangeUniformly) {
  Rng r(2);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
  std::set<int> seen;
  for (int i = 0; i < 1000; ++i) {
    const int v = r.uniform_int(-2, 2);
    ASSERT_GE(v, -2);
    ASSERT_LE(v, 2);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 5u);
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  const int n = 200000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal(2.0, 3.0);
    s += x;
    ss += x * x;
  }
  const double mean = s / n;
  EXPECT_NEAR(mean, 2.0, 0.03);
  EXPECT_NEAR(std::sqrt(ss / n - mean * mean), 3.0, 0.03);
}

TEST(StableHash, Fnv1aVectors) {
  EXPECT_EQ(stable_hash(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(stable_hash("a"), 0xaf63dc4c8601ec8cULL);
}

}  // namespace
}  // namespace ctm
