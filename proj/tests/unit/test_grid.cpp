#include <gtest/gtest.h>

#include "ctm/grid.hpp"
#include "ctm/rng.hpp"

namespace ctm {
namespace {

GridGeometry geom(Dims d, Spacing s = {1, 1, 1}) { return {d, s, {0, 0, 0}}; }

TEST(Spacing, VoxelVolume) {
  EXPECT_DOUBLE_EQ(voxel_volume_mm3({1, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(voxel_volume_mm3({1.5, 1.5, 1.5}), 3.375);
  EXPECT_DOUBLE_EQ(voxel_volume_mm3({0.75, 0.75, 3.0}), 1.6875);
  EXPECT_THROW(Spacing(0.0, 1.0, 1.0), ParameterError);
  EXPECT_THROW(Spacing(1.0, -1.0, 1.0), ParameterError);
}

TEST(Dims, IndexRoundTrip) {
  const Dims d(5, 3, 4);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 5; ++x) {
        const std::size_t i = d.index(x, y, z);
        EXPECT_EQ(i, static_cast<std::size_t>(x + 5 * (y + 3 * z)));
        EXPECT_EQ(d.coords(i), (Index3{x, y, z}));
      }
  EXPECT_THROW(Dims(0, 1, 1), ParameterError);
}

TEST(Box3D, HalfOpenAndValidated) {
  const Box3D b({1, 2, 3}, {4, 4, 4});
  EXPECT_EQ(b.extent(0), 3);
  EXPECT_EQ(b.volume(), 6);
  EXPECT_TRUE(b.contains(Index3{3, 3, 3}));
  EXPECT_FALSE(b.contains(Index3{4, 3, 3}));
  EXPECT_THROW(Box3D({1, 1, 1}, {1, 2, 2}), ParameterError);
  EXPECT_TRUE(b.within(Dims(4, 4, 4)));
  EXPECT_FALSE(b.within(Dims(3, 4, 4)));
}

TEST(Box3D, IouHalfOverlapIsOneThird) {
  EXPECT_NEAR(box_iou_3d(Box3D({0, 0, 0}, {10, 10, 10}), Box3D({5, 0, 0}, {15, 10, 10})), 1.0 / 3.0,
              1e-12);
  EXPECT_DOUBLE_EQ(box_iou_3d(Box3D({0, 0, 0}, {2, 2, 2}), Box3D({0, 0, 0}, {2, 2, 2})), 1.0);
  EXPECT_DOUBLE_EQ(box_iou_3d(Box3D({0, 0, 0}, {2, 2, 2}), Box3D({2, 0, 0}, {4, 2, 2})), 0.0);
}

TEST(OrganId, BijectiveWithLabels) {
  for (int l = 1; l <= 5; ++l) {
    const OrganId o = organ_from_label(static_cast<std::uint8_t>(l));
    EXPECT_EQ(label_of(o), l);
    EXPECT_EQ(organ_from_name(organ_name(o)), o);
  }
  EXPECT_THROW(organ_from_label(0), ParameterError);
  EXPECT_THROW(organ_from_label(6), ParameterError);
}

TEST(LabelMask, RejectsOutOfRangeCodes) {
  EXPECT_THROW(LabelMask(geom(Dims(2, 1, 1)), std::vector<std::uint8_t>{0, 6}), ValidationError);
  EXPECT_THROW(SubregionMask(geom(Dims(1, 1, 1)), std::vector<std::uint8_t>{5}), ValidationError);
  EXPECT_THROW(VoxelGrid(geom(Dims(2, 2, 2)), std::vector<float>(7)), ShapeError);
}

TEST(BoundingBox, Examples) {
  LabelMask m(geom(Dims(8, 8, 8)));
  EXPECT_FALSE(bounding_box_of(m, OrganId::Liver));
  m.at(3, 4, 5) = 1;
  const auto b = bounding_box_of(m, OrganId::Liver);
  ASSERT_TRUE(b);
  EXPECT_EQ(b->lo(), (Index3{3, 4, 5}));
  EXPECT_EQ(b->hi(), (Index3{4, 5, 6}));
  LabelMask two(geom(Dims(4, 2, 2)));
  two.at(0, 0, 0) = 2;
  two.at(2, 0, 0) = 2;
  const auto b2 = bounding_box_of(two, OrganId::RightKidney);
  EXPECT_EQ(b2->lo(), (Index3{0, 0, 0}));
  EXPECT_EQ(b2->hi(), (Index3{3, 1, 1}));
}

TEST(BoundingBox, TightestOnRandomMasks) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Dims d(rng.uniform_int(1, 16), rng.uniform_int(1, 16), rng.uniform_int(1, 16));
    LabelMask m(geom(d));
    const int n = rng.uniform_int(0, 6);
    for (int k = 0; k < n; ++k) {
      m.at(rng.uniform_int(0, d.nx - 1), rng.uniform_int(0, d.ny - 1), rng.uniform_int(0, d.nz - 1)) = 4;
    }
    const auto b = bounding_box_of(m, OrganId::Spleen);
    int count = 0;
    std::array<int, 3> lo{99, 99, 99}, hi{-1, -1, -1};
    for (std::size_t i = 0; i < d.count(); ++i) {
      if (m[i] != 4) continue;
      ++count;
      const Index3 p = d.coords(i);
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a] + 1);
      }
      ASSERT_TRUE(b);
      EXPECT_TRUE(b->contains(p));
    }
    if (count == 0) {
      EXPECT_FALSE(b);
      continue;
    }
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(b->lo()[a], lo[a]);
      EXPECT_EQ(b->hi()[a], hi[a]);
    }
  }
}

TEST(Crop, IdentityOneVoxelAndIndexFormula) {
  const Dims d(4, 4, 4);
  std::vector<float> v(d.count());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  const VoxelGrid g(geom(d, {1, 2, 3}), v);
  EXPECT_EQ(crop(g, Box3D({0, 0, 0}, {4, 4, 4})), g);
  const auto one = crop(g, Box3D({0, 0, 0}, {1, 1, 1}));
  EXPECT_EQ(one.dims(), Dims(1, 1, 1));
  EXPECT_EQ(one[0], 0.0f);
  const auto c = crop(g, Box3D({1, 1, 1}, {3, 3, 3}));
  EXPECT_EQ(c.dims(), Dims(2, 2, 2));
  EXPECT_EQ(c.origin(), (Vec3{1, 2, 3}));
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) {
        EXPECT_EQ(c.at(x, y, z), static_cast<float>((x + 1) + 4 * ((y + 1) + 4 * (z + 1))));
      }
  EXPECT_THROW(crop(g, Box3D({2, 2, 2}, {5, 3, 3})), BoundsError);
}

TEST(Crop, Composition) {
  Rng rng(2);
  const Dims d(9, 8, 7);
  std::vector<float> v(d.count());
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const VoxelGrid g(geom(d, {0.5, 1, 2}), v);
  const Box3D outer({1, 2, 1}, {8, 7, 6});
  const Box3D inner({2, 1, 0}, {5, 4, 3});
  const Box3D direct({3, 3, 1}, {6, 6, 4});
  EXPECT_EQ(crop(crop(g, outer), inner), crop(g, direct));
  const auto whole = crop(g, outer);
  EXPECT_EQ(crop(whole, Box3D({0, 0, 0}, {7, 5, 5})), whole);
}

}  // namespace
}  // namespace ctm
