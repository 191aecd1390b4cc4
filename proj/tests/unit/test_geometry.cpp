#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ctm/geometry.hpp"
#include "ctm/rng.hpp"

namespace ctm::geo {
namespace {

constexpr double kPi = std::numbers::pi;

LabelMask blank(Dims d, Spacing s = {}) {
  GridGeometry g;
  g.dims = d;
  g.spacing = s;
  return LabelMask(g);
}

/// Voxel centers inside the ellipsoid (radii in mm) centred in the grid.
LabelMask ellipsoid(Dims d, Spacing s, Vec3 radii, OrganId organ) {
  LabelMask m = blank(d, s);
  const double cx = 0.5 * (d.nx - 1), cy = 0.5 * (d.ny - 1), cz = 0.5 * (d.nz - 1);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double u = (x - cx) * s.dx / radii.x, v = (y - cy) * s.dy / radii.y,
                     w = (z - cz) * s.dz / radii.z;
        if (u * u + v * v + w * w <= 1.0) m.at(x, y, z) = label_of(organ);
      }
  return m;
}

LabelMask shifted(const LabelMask& m, Index3 t, Dims out) {
  GridGeometry g = m.geometry();
  g.dims = out;
  LabelMask r(g);
  const Dims& d = m.dims();
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) r.at(x + t.x, y + t.y, z + t.z) = m.at(x, y, z);
  return r;
}

TEST(Volume, TrivialCases) {
  LabelMask m = blank(Dims(12, 12, 12));
  EXPECT_FALSE(organ_volume_cc(m, OrganId::Liver));
  m.at(0, 0, 0) = 1;
  EXPECT_DOUBLE_EQ(*organ_volume_cc(m, OrganId::Liver), 0.001);
  for (int z = 0; z < 10; ++z)
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x) m.at(x, y, z) = 2;
  EXPECT_DOUBLE_EQ(*organ_volume_cc(m, OrganId::RightKidney), 1.0);
}

TEST(Volume, EllipsoidWithinTwoPercent) {
  const auto m = ellipsoid(Dims(70, 50, 40), Spacing(1, 1, 1), {30, 20, 15}, OrganId::Liver);
  const double analytic = 4.0 / 3.0 * kPi * 30 * 20 * 15 / 1000.0;
  EXPECT_NEAR(analytic, 37.699, 1e-3);
  EXPECT_NEAR(*organ_volume_cc(m, OrganId::Liver) / analytic, 1.0, 0.02);
}

TEST(Length, LineAlongZ) {
  LabelMask m = blank(Dims(3, 3, 25));
  for (int z = 2; z < 22; ++z) m.at(1, 1, z) = 2;
  EXPECT_NEAR(*organ_length_mm(m, OrganId::RightKidney), 20.0, 1e-9);
  LabelMask m2 = blank(Dims(3, 3, 25), Spacing(1, 1, 2));
  for (int z = 2; z < 22; ++z) m2.at(1, 1, z) = 2;
  EXPECT_NEAR(*organ_length_mm(m2, OrganId::RightKidney), 40.0, 1e-9);
}

TEST(Length, NeedsTwoVoxels) {
  LabelMask m = blank(Dims(3, 3, 3));
  EXPECT_FALSE(organ_length_mm(m, OrganId::Liver));
  m.at(1, 1, 1) = 1;
  EXPECT_FALSE(organ_length_mm(m, OrganId::Liver));
}

TEST(Length, EllipsoidMajorDiameterWithinThreePercent) {
  const auto m = ellipsoid(Dims(70, 50, 40), Spacing(1, 1, 1), {30, 20, 15}, OrganId::Liver);
  EXPECT_NEAR(*organ_length_mm(m, OrganId::Liver) / 60.0, 1.0, 0.03);
  // Rotated: major axis along z at anisotropic spacing.
  const auto r = ellipsoid(Dims(24, 30, 40), Spacing(1.5, 1.5, 2.0), {15, 20, 30}, OrganId::Liver);
  EXPECT_NEAR(*organ_length_mm(r, OrganId::Liver) / 60.0, 1.0, 0.03);
}

TEST(Length, TiedAxesPreferZ) {
  // A cube has an isotropic covariance; the +z tie-break gives its z extent.
  LabelMask m = blank(Dims(6, 6, 6), Spacing(1, 1, 1));
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) m.at(x, y, z) = 1;
  EXPECT_NEAR(*organ_length_mm(m, OrganId::Liver), 4.0, 1e-9);
}

TEST(Length, AtLeastEveryAxisExtent) {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    LabelMask m = blank(Dims(10, 10, 10), Spacing(1.0, 1.25, 2.0));
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform() < 0.05 ? 1 : 0;
    const auto len = organ_length_mm(m, OrganId::Liver);
    if (!len) continue;
    const auto box = *bounding_box_of(m, OrganId::Liver);
    for (int a = 0; a < 3; ++a) {
      const double centre_extent = (box.extent(a) - 1) * m.spacing()[a];
      EXPECT_GE(*len + 1e-9, centre_extent);
    }
  }
}

TEST(ApDiameter, TrivialAndSphere) {
  LabelMask m = blank(Dims(3, 12, 3), Spacing(1, 2, 1));
  m.at(1, 4, 1) = 5;
  EXPECT_DOUBLE_EQ(*ap_diameter_mm(m, OrganId::Prostate), 2.0);
  for (int y = 0; y < 10; ++y) m.at(1, y, 1) = 5;
  EXPECT_DOUBLE_EQ(*ap_diameter_mm(m, OrganId::Prostate), 20.0);
  const auto s = ellipsoid(Dims(40, 40, 40), Spacing(1, 1, 1), {15, 15, 15}, OrganId::Prostate);
  EXPECT_NEAR(*ap_diameter_mm(s, OrganId::Prostate), 30.0, 2.0);
}

TEST(SurfaceArea, VoxelAndCube) {
  LabelMask m = blank(Dims(12, 12, 12));
  m.at(3, 3, 3) = 4;
  EXPECT_DOUBLE_EQ(*surface_area_cm2(m, OrganId::Spleen), 0.06);
  for (int z = 1; z < 11; ++z)
    for (int y = 1; y < 11; ++y)
      for (int x = 1; x < 11; ++x) m.at(x, y, z) = 4;
  EXPECT_EQ(*surface_area_cm2(m, OrganId::Spleen), 6.0);
  // The grid boundary counts as exposure.
  LabelMask full = blank(Dims(10, 10, 10));
  for (auto& v : full.data()) v = 4;
  EXPECT_EQ(*surface_area_cm2(full, OrganId::Spleen), 6.0);
}

TEST(SurfaceArea, SphereInflationNearOnePointFive) {
  for (double r : {10.0, 15.0, 20.0}) {
    const int n = static_cast<int>(2 * r) + 6;
    const auto s = ellipsoid(Dims(n, n, n), Spacing(1, 1, 1), {r, r, r}, OrganId::Spleen);
    const double analytic_cm2 = 4.0 * kPi * r * r / 100.0;
    const double ratio = *surface_area_cm2(s, OrganId::Spleen) / analytic_cm2;
    EXPECT_NEAR(ratio, kSurfaceInflation, 0.1 * kSurfaceInflation) << r;
  }
}

TEST(Additivity, DisjointComponentsAdd) {
  LabelMask a = blank(Dims(20, 10, 10));
  LabelMask b = a, both = a;
  for (int z = 1; z < 5; ++z)
    for (int y = 1; y < 6; ++y)
      for (int x = 1; x < 4; ++x) a.at(x, y, z) = both.at(x, y, z) = 4;
  for (int z = 2; z < 9; ++z)
    for (int y = 3; y < 5; ++y)
      for (int x = 10; x < 17; ++x) b.at(x, y, z) = both.at(x, y, z) = 4;
  EXPECT_DOUBLE_EQ(*organ_volume_cc(both, OrganId::Spleen),
                   *organ_volume_cc(a, OrganId::Spleen) + *organ_volume_cc(b, OrganId::Spleen));
  EXPECT_DOUBLE_EQ(*surface_area_cm2(both, OrganId::Spleen),
                   *surface_area_cm2(a, OrganId::Spleen) + *surface_area_cm2(b, OrganId::Spleen));
}

std::vector<double> brute_force_edt(const std::vector<std::uint8_t>& region, const Dims& d,
                                    const Spacing& s) {
  std::vector<double> out(region.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (region[i] == 0) {
      out[i] = 0.0;
      continue;
    }
    const Index3 p = d.coords(i);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < region.size(); ++j) {
      if (region[j] != 0) continue;
      const Index3 q = d.coords(j);
      const double dx = (p.x - q.x) * s.dx, dy = (p.y - q.y) * s.dy, dz = (p.z - q.z) * s.dz;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

TEST(DistanceTransform, BlockCentre) {
  const Dims d(7, 7, 7);
  std::vector<std::uint8_t> region(d.count(), 0);
  for (int z = 1; z < 6; ++z)
    for (int y = 1; y < 6; ++y)
      for (int x = 1; x < 6; ++x) region[d.index(x, y, z)] = 1;
  const auto dist = euclidean_distance_transform(region, d, Spacing(1, 1, 1));
  EXPECT_EQ(dist[d.index(3, 3, 3)], 3.0);
  EXPECT_EQ(dist[d.index(0, 0, 0)], 0.0);
}

TEST(DistanceTransform, NoBackgroundIsInfinite) {
  const Dims d(3, 3, 3);
  const auto dist = euclidean_distance_transform(std::vector<std::uint8_t>(27, 1), d, Spacing());
  for (double v : dist) EXPECT_TRUE(std::isinf(v));
}

TEST(DistanceTransform, MatchesBruteForceExactly) {
  Rng rng(22);
  for (int trial = 0; trial < 40; ++trial) {
    const Dims d(rng.uniform_int(1, 12), rng.uniform_int(1, 12), rng.uniform_int(1, 12));
    const Spacing sp(0.5 * rng.uniform_int(1, 4), 0.5 * rng.uniform_int(1, 4),
                     0.5 * rng.uniform_int(1, 4));
    std::vector<std::uint8_t> region(d.count());
    const double fill = rng.uniform(0.5, 0.97);
    for (auto& v : region) v = rng.uniform() < fill;
    EXPECT_EQ(euclidean_distance_transform(region, d, sp), brute_force_edt(region, d, sp))
        << "trial " << trial;
  }
}

SubregionMask slab(int thickness, Spacing s, Subregion code) {
  GridGeometry g;
  g.dims = Dims(12, 12, thickness + 4);
  g.spacing = s;
  SubregionMask m(g);
  for (int z = 2; z < 2 + thickness; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x) m.at(x, y, z) = static_cast<std::uint8_t>(code);
  return m;
}

TEST(CorticalThickness, SlabsAndScaling) {
  const auto three = slab(3, Spacing(1, 1, 1), Subregion::RightKidneyCortex);
  EXPECT_NEAR(*cortical_thickness_mm(three, KidneySide::Right), 3.0, 0.5);
  EXPECT_FALSE(cortical_thickness_mm(three, KidneySide::Left));
  const auto four = slab(4, Spacing(1, 1, 1), Subregion::LeftKidneyCortex);
  EXPECT_NEAR(*cortical_thickness_mm(four, KidneySide::Left), 4.0, 0.5);
  const auto doubled = slab(3, Spacing(2, 2, 2), Subregion::RightKidneyCortex);
  EXPECT_NEAR(*cortical_thickness_mm(doubled, KidneySide::Right),
              2.0 * *cortical_thickness_mm(three, KidneySide::Right), 1e-9);
}

TEST(Lobes, PartitionAndMissing) {
  GridGeometry g;
  g.dims = Dims(4, 4, 4);
  SubregionMask s(g);
  LabelMask liver(g);
  for (std::size_t i = 0; i < s.size(); ++i) {
    liver[i] = 1;
    s[i] = static_cast<std::uint8_t>(i % 3 == 0 ? Subregion::LiverLeftLobe : Subregion::LiverRightLobe);
  }
  const auto [r, l] = lobe_volumes_cc(s);
  EXPECT_DOUBLE_EQ(*r + *l, *organ_volume_cc(liver, OrganId::Liver));
  SubregionMask only_right(g);
  for (auto& v : only_right.data()) v = static_cast<std::uint8_t>(Subregion::LiverRightLobe);
  const auto [r2, l2] = lobe_volumes_cc(only_right);
  EXPECT_DOUBLE_EQ(*r2, 0.064);
  EXPECT_FALSE(l2);
}

TEST(Invariance, WholeVoxelTranslationChangesNothing) {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    LabelMask m = blank(Dims(10, 9, 8), Spacing(1.0, 1.5, 2.5));
    for (std::size_t i = 0; i < m.size(); ++i) {
      const Index3 p = m.dims().coords(i);
      if (std::abs(p.x - 5) + std::abs(p.y - 4) + std::abs(p.z - 4) <= 3 || rng.uniform() < 0.03) {
        m[i] = 2;
      }
    }
    const Index3 t{rng.uniform_int(0, 5), rng.uniform_int(0, 5), rng.uniform_int(0, 5)};
    const LabelMask s = shifted(m, t, Dims(16, 15, 14));
    const auto a = measure_organ(m, nullptr, OrganId::RightKidney);
    const auto b = measure_organ(s, nullptr, OrganId::RightKidney);
    EXPECT_EQ(a.values, b.values);
    EXPECT_EQ(*surface_area_cm2(m, OrganId::RightKidney), *surface_area_cm2(s, OrganId::RightKidney));
    EXPECT_EQ(*ap_diameter_mm(m, OrganId::RightKidney), *ap_diameter_mm(s, OrganId::RightKidney));
  }
}

TEST(MeasureOrgan, FillsOrganQuantities) {
  const auto m = ellipsoid(Dims(30, 30, 30), Spacing(1, 1, 1), {10, 8, 6}, OrganId::Prostate);
  const auto g = measure_organ(m, nullptr, OrganId::Prostate);
  EXPECT_TRUE(g.values.get(Quantity::VolumeCc));
  EXPECT_TRUE(g.values.get(Quantity::ApDiameterMm));
  EXPECT_FALSE(g.values.get(Quantity::LengthMm));
  const auto j = g.to_json(OrganId::Prostate);
  EXPECT_EQ(j["provenance"], "geometric");
  EXPECT_TRUE(j.contains("ap_diameter_mm"));
}

}  // namespace
}  // namespace ctm::geo
