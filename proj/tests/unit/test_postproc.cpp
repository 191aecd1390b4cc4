#include <gtest/gtest.h>

#include <map>
#include <numeric>

#include "ctm/postproc.hpp"
#include "ctm/rng.hpp"

namespace ctm::post {
namespace {

LabelMask blank(int nx, int ny, int nz) {
  GridGeometry g;
  g.dims = Dims(nx, ny, nz);
  return LabelMask(g);
}

/// Union-find labeling: unions every adjacent equal-label pair, then numbers
/// roots by their first appearance in linear order.
std::vector<std::uint32_t> union_find_oracle(const LabelMask& m, int connectivity) {
  const Dims& d = m.dims();
  std::vector<std::size_t> parent(d.count());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };
  for (std::size_t i = 0; i < d.count(); ++i) {
    if (m[i] == 0) continue;
    const Index3 p = d.coords(i);
    for (std::size_t j = i + 1; j < d.count(); ++j) {
      if (m[j] != m[i]) continue;
      const Index3 q = d.coords(j);
      const int ax = std::abs(p.x - q.x), ay = std::abs(p.y - q.y), az = std::abs(p.z - q.z);
      if (ax > 1 || ay > 1 || az > 1) continue;
      if (connectivity == 6 && ax + ay + az != 1) continue;
      parent[find(i)] = find(j);
    }
  }
  std::map<std::size_t, std::uint32_t> number;
  std::vector<std::uint32_t> out(d.count(), 0);
  for (std::size_t i = 0; i < d.count(); ++i) {
    if (m[i] == 0) continue;
    const auto [it, fresh] = number.try_emplace(find(i), static_cast<std::uint32_t>(number.size() + 1));
    out[i] = it->second;
  }
  return out;
}

LabelMask random_mask(Rng& rng, int max_side) {
  const int nx = rng.uniform_int(1, max_side), ny = rng.uniform_int(1, max_side),
            nz = rng.uniform_int(1, max_side);
  LabelMask m = blank(nx, ny, nz);
  const double fill = rng.uniform(0.1, 0.6);
  const int labels = rng.uniform_int(1, 5);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (rng.uniform() < fill) m[i] = static_cast<std::uint8_t>(rng.uniform_int(1, labels));
  }
  return m;
}

void fill_block(LabelMask& m, Index3 lo, Dims ext, std::uint8_t label) {
  for (int z = 0; z < ext.nz; ++z)
    for (int y = 0; y < ext.ny; ++y)
      for (int x = 0; x < ext.nx; ++x) m.at(lo.x + x, lo.y + y, lo.z + z) = label;
}

TEST(ConnectedComponents, EmptyMaskHasNone) {
  EXPECT_EQ(connected_components(blank(4, 4, 4)).size(), 0u);
}

TEST(ConnectedComponents, SingleVoxel) {
  LabelMask m = blank(3, 3, 3);
  m.at(1, 2, 0) = 4;
  const auto cs = connected_components(m);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs.component(1).voxels, 1);
  EXPECT_EQ(cs.component(1).label, 4);
  EXPECT_EQ(cs.component(1).box, Box3D({1, 2, 0}, {2, 3, 1}));
}

TEST(ConnectedComponents, DiagonalNeighboursDependOnConnectivity) {
  LabelMask m = blank(2, 2, 2);
  m.at(0, 0, 0) = 1;
  m.at(1, 1, 1) = 1;
  EXPECT_EQ(connected_components(m, 26).size(), 1u);
  EXPECT_EQ(connected_components(m, 6).size(), 2u);
}

TEST(ConnectedComponents, DifferentLabelsNeverMerge) {
  LabelMask m = blank(2, 1, 1);
  m[0] = 1;
  m[1] = 2;
  const auto cs = connected_components(m);
  ASSERT_EQ(cs.size(), 2u);
  EXPECT_EQ(cs.component(1).label, 1);
  EXPECT_EQ(cs.component(2).label, 2);
}

TEST(ConnectedComponents, RejectsOtherConnectivity) {
  EXPECT_THROW(connected_components(blank(2, 2, 2), 18), ParameterError);
  EXPECT_THROW(remove_small_components(blank(2, 2, 2), 100, 4), ParameterError);
}

TEST(ConnectedComponents, MatchesUnionFindOracleOnRandomMasks) {
  Rng rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const LabelMask m = random_mask(rng, 9);
    for (int conn : {6, 26}) {
      const auto cs = connected_components(m, conn);
      const auto oracle = union_find_oracle(m, conn);
      ASSERT_EQ(cs.ids, oracle) << "trial " << trial << " conn " << conn;
      // Dense ids, one label each, counts and first indices agree.
      std::vector<std::int64_t> counts(cs.size() + 1, 0);
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (cs.ids[i] == 0) continue;
        ++counts[cs.ids[i]];
        EXPECT_EQ(cs.component(cs.ids[i]).label, m[i]);
      }
      for (std::uint32_t k = 1; k <= cs.size(); ++k) {
        EXPECT_EQ(cs.component(k).voxels, counts[k]);
        EXPECT_EQ(cs.ids[cs.component(k).first_index], k);
      }
    }
  }
}

TEST(RemoveSmall, StrictBoundaryAt100) {
  LabelMask m = blank(30, 30, 10);
  // 99 voxels: 9x11x1. 100 voxels: 10x10x1. Far apart.
  fill_block(m, {0, 0, 0}, Dims(9, 11, 1), 2);
  fill_block(m, {15, 15, 5}, Dims(10, 10, 1), 2);
  const LabelMask out = remove_small_components(m);
  EXPECT_EQ(out.at(0, 0, 0), 0);
  EXPECT_EQ(out.at(8, 10, 0), 0);
  EXPECT_EQ(out.at(15, 15, 5), 2);
  std::int64_t kept = 0;
  for (std::size_t i = 0; i < out.size(); ++i) kept += out[i] != 0;
  EXPECT_EQ(kept, 100);
}

TEST(RemoveSmall, EmptyStaysEmpty) {
  const LabelMask m = blank(5, 5, 5);
  EXPECT_EQ(remove_small_components(m), m);
}

TEST(RemoveSmall, FiftyAndOneFifty) {
  LabelMask m = blank(20, 20, 20);
  fill_block(m, {0, 0, 0}, Dims(5, 10, 1), 1);
  fill_block(m, {0, 0, 10}, Dims(10, 15, 1), 3);
  const LabelMask out = remove_small_components(m);
  const auto cs = connected_components(out);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs.component(1).voxels, 150);
  EXPECT_EQ(cs.component(1).label, 3);
}

TEST(RemoveSmall, SubsetAndIdempotentOnRandomMasks) {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const LabelMask m = random_mask(rng, 12);
    const int min_voxels = rng.uniform_int(1, 30);
    const LabelMask once = remove_small_components(m, min_voxels);
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_TRUE(once[i] == 0 || once[i] == m[i]);
    }
    EXPECT_EQ(remove_small_components(once, min_voxels), once);
  }
}

TEST(KeepLargest, SingleComponentUnchanged) {
  LabelMask m = blank(6, 6, 6);
  fill_block(m, {1, 1, 1}, Dims(3, 3, 3), 1);
  EXPECT_EQ(keep_largest_component(m, OrganId::Liver), m);
}

TEST(KeepLargest, KeepsBiggerAndLeavesOtherOrgans) {
  LabelMask m = blank(20, 20, 20);
  fill_block(m, {0, 0, 0}, Dims(10, 1, 1), 4);
  fill_block(m, {5, 5, 5}, Dims(10, 10, 5), 4);
  fill_block(m, {0, 18, 18}, Dims(2, 1, 1), 5);
  const LabelMask out = keep_largest_component(m, OrganId::Spleen);
  EXPECT_EQ(out.at(0, 0, 0), 0);
  EXPECT_EQ(out.at(5, 5, 5), 4);
  EXPECT_EQ(out.at(0, 18, 18), 5);
}

TEST(KeepLargest, TieGoesToLowerLinearIndex) {
  LabelMask m = blank(10, 1, 1);
  m[7] = 1;
  m[8] = 1;
  m[2] = 1;
  m[3] = 1;
  const LabelMask out = keep_largest_component(m, OrganId::Liver);
  EXPECT_EQ(out[2], 1);
  EXPECT_EQ(out[3], 1);
  EXPECT_EQ(out[7], 0);
  EXPECT_EQ(out[8], 0);
}

}  // namespace
}  // namespace ctm::post
