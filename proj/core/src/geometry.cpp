#include "ctm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include <Eigen/Dense>

namespace ctm::geo {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<Index3> organ_voxels(const LabelMask& mask, OrganId organ) {
  const std::uint8_t label = label_of(organ);
  std::vector<Index3> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == label) out.push_back(mask.dims().coords(i));
  }
  return out;
}

std::optional<double> axis_extent_mm(const LabelMask& mask, OrganId organ, int axis) {
  const auto box = bounding_box_of(mask, organ);
  if (!box) return std::nullopt;
  return box->extent(axis) * mask.spacing()[axis];
}

std::size_t count_code(const SubregionMask& m, Subregion code) {
  const auto c = static_cast<std::uint8_t>(code);
  return static_cast<std::size_t>(std::count(m.data().begin(), m.data().end(), c));
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line of
// squared distances f with sample spacing s.
void edt_line(const double* f, double* out, int n, double s, std::vector<int>& v,
              std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  const double s2 = s * s;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double sep;
    while (true) {
      const int p = v[k];
      sep = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
      if (sep <= z[k]) {
        if (--k < 0) break;
      } else {
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = sep;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = static_cast<double>(q - v[j]) * s;
    out[q] = f[v[j]] + d * d;
  }
}

}  // namespace

std::optional<double> organ_volume_cc(const LabelMask& mask, OrganId organ) {
  const std::uint8_t label = label_of(organ);
  const auto n = std::count(mask.data().begin(), mask.data().end(), label);
  if (n == 0) return std::nullopt;
  return static_cast<double>(n) * voxel_volume_mm3(mask.spacing()) / 1000.0;
}

std::optional<double> organ_length_mm(const LabelMask& mask, OrganId organ) {
  const auto voxels = organ_voxels(mask, organ);
  if (voxels.size() < 2) return std::nullopt;
  // Coordinates relative to the first voxel keep the result exactly
  // translation-invariant.
  const Index3 ref = voxels.front();
  const Spacing& sp = mask.spacing();
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  auto pos = [&](const Index3& p) {
    return Eigen::Vector3d((p.x - ref.x) * sp.dx, (p.y - ref.y) * sp.dy, (p.z - ref.z) * sp.dz);
  };
  for (const auto& p : voxels) mean += pos(p);
  mean /= static_cast<double>(voxels.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : voxels) {
    const Eigen::Vector3d d = pos(p) - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(voxels.size());

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
  const Eigen::Matrix3d vecs = eig.eigenvectors();
  const double tol = 1e-9 * std::max(1.0, std::abs(lambda(2)));
  // Eigenvectors tied with the largest eigenvalue span a subspace; pick the
  // direction in it closest to +z.
  Eigen::Vector3d axis = vecs.col(2);
  int tied_from = 2;
  while (tied_from > 0 && lambda(2) - lambda(tied_from - 1) <= tol) --tied_from;
  if (tied_from < 2) {
    const Eigen::Vector3d ez(0.0, 0.0, 1.0);
    Eigen::Vector3d proj = Eigen::Vector3d::Zero();
    for (int c = tied_from; c <= 2; ++c) proj += vecs.col(c).dot(ez) * vecs.col(c);
    if (proj.norm() > 1e-12) axis = proj.normalized();
  }
  if (axis.z() < 0.0) axis = -axis;

  double lo = kInf, hi = -kInf;
  for (const auto& p : voxels) {
    const double t = pos(p).dot(axis);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  const double step = std::sqrt(axis.x() * axis.x() * sp.dx * sp.dx +
                                axis.y() * axis.y() * sp.dy * sp.dy +
                                axis.z() * axis.z() * sp.dz * sp.dz);
  return (hi - lo) + step;
}

std::optional<double> z_extent_mm(const LabelMask& mask, OrganId organ) {
  return axis_extent_mm(mask, organ, 2);
}

std::optional<double> ap_diameter_mm(const LabelMask& mask, OrganId organ) {
  return axis_extent_mm(mask, organ, 1);
}

std::optional<double> surface_area_cm2(const LabelMask& mask, OrganId organ) {
  const std::uint8_t label = label_of(organ);
  const Dims& d = mask.dims();
  const Spacing& s = mask.spacing();
  const std::array<double, 3> face = {s.dy * s.dz, s.dx * s.dz, s.dx * s.dy};
  std::array<std::int64_t, 3> faces{0, 0, 0};
  bool any = false;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) {
        if (mask.at(x, y, z) != label) continue;
        any = true;
        const Index3 p{x, y, z};
        for (int a = 0; a < 3; ++a) {
          for (int dir : {-1, 1}) {
            Index3 q = p;
            q[a] += dir;
            if (!d.contains(q) || mask.at(q) != label) ++faces[a];
          }
        }
      }
    }
  }
  if (!any) return std::nullopt;
  double mm2 = 0.0;
  for (int a = 0; a < 3; ++a) mm2 += static_cast<double>(faces[a]) * face[a];
  return mm2 / 100.0;
}

std::vector<double> euclidean_distance_transform(const std::vector<std::uint8_t>& region,
                                                 const Dims& dims, const Spacing& spacing) {
  if (region.size() != dims.count()) throw ShapeError("distance transform region size mismatch");
  std::vector<double> sq(region.size());
  for (std::size_t i = 0; i < region.size(); ++i) sq[i] = region[i] == 0 ? 0.0 : kInf;

  std::vector<int> v;
  std::vector<double> z, in, out;
  const int n[3] = {dims.nx, dims.ny, dims.nz};
  const std::size_t stride[3] = {1, static_cast<std::size_t>(dims.nx),
                                 static_cast<std::size_t>(dims.nx) * dims.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    in.resize(len);
    out.resize(len);
    const int a1 = axis == 0 ? 1 : 0;
    const int a2 = axis == 2 ? 1 : 2;
    for (int j = 0; j < n[a2]; ++j) {
      for (int i = 0; i < n[a1]; ++i) {
        const std::size_t base = i * stride[a1] + j * stride[a2];
        for (int q = 0; q < len; ++q) in[q] = sq[base + q * stride[axis]];
        edt_line(in.data(), out.data(), len, spacing[axis], v, z);
        for (int q = 0; q < len; ++q) sq[base + q * stride[axis]] = out[q];
      }
    }
  }
  for (double& d : sq) d = std::sqrt(d);
  return sq;
}

std::optional<double> cortical_thickness_mm(const SubregionMask& subregions, KidneySide side) {
  const auto code = static_cast<std::uint8_t>(side == KidneySide::Right
                                                  ? Subregion::RightKidneyCortex
                                                  : Subregion::LeftKidneyCortex);
  const Dims& d = subregions.dims();
  const Spacing& s = subregions.spacing();
  std::vector<std::uint8_t> region(subregions.size());
  bool any = false;
  for (std::size_t i = 0; i < region.size(); ++i) {
    region[i] = subregions[i] == code;
    any = any || region[i];
  }
  if (!any) return std::nullopt;
  const auto dist = euclidean_distance_transform(region, d, s);

  auto dist_at = [&](const Index3& q) {
    return d.contains(q) ? dist[d.index(q.x, q.y, q.z)] : 0.0;
  };
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region[i] || !std::isfinite(dist[i])) continue;
    const Index3 p = d.coords(i);
    const double v = dist[i];
    int strict_axis = -1, ridge_axis = -1;
    bool is_max = true;
    for (int a = 0; a < 3 && is_max; ++a) {
      Index3 lo = p, hi = p;
      --lo[a];
      ++hi[a];
      const double l = dist_at(lo), h = dist_at(hi);
      if (v < l || v < h) {
        is_max = false;
      } else if (v > l && v > h) {
        if (strict_axis < 0) strict_axis = a;
      } else if (v > l || v > h) {
        if (ridge_axis < 0) ridge_axis = a;
      }
    }
    if (!is_max) continue;
    if (strict_axis >= 0) {
      sum += v - 0.5 * s[strict_axis];
    } else if (ridge_axis >= 0) {
      sum += v;
    } else {
      continue;
    }
    ++count;
  }
  if (count == 0) return std::nullopt;
  return 2.0 * sum / static_cast<double>(count);
}

std::pair<std::optional<double>, std::optional<double>> lobe_volumes_cc(
    const SubregionMask& subregions) {
  const double vox = voxel_volume_mm3(subregions.spacing()) / 1000.0;
  auto vol = [&](Subregion code) -> std::optional<double> {
    const auto n = count_code(subregions, code);
    if (n == 0) return std::nullopt;
    return static_cast<double>(n) * vox;
  };
  return {vol(Subregion::LiverRightLobe), vol(Subregion::LiverLeftLobe)};
}

nlohmann::json GeoMeasurements::to_json(OrganId organ) const {
  nlohmann::json j = values.to_json(organ);
  j["z_extent_mm"] = z_extent_mm ? nlohmann::json(*z_extent_mm) : nlohmann::json(nullptr);
  if (organ == OrganId::Spleen) j["surface_inflation"] = kSurfaceInflation;
  j["provenance"] = "geometric";
  return j;
}

GeoMeasurements measure_organ(const LabelMask& mask, const SubregionMask* subregions,
                              OrganId organ) {
  if (subregions && subregions->geometry() != mask.geometry()) {
    throw ShapeError("subregion mask geometry differs from label mask");
  }
  GeoMeasurements g;
  Measurements& m = g.values;
  m.set(Quantity::VolumeCc, organ_volume_cc(mask, organ));
  g.z_extent_mm = z_extent_mm(mask, organ);
  switch (organ) {
    case OrganId::RightKidney:
    case OrganId::LeftKidney:
      m.set(Quantity::LengthMm, organ_length_mm(mask, organ));
      if (subregions) {
        m.set(Quantity::CorticalThicknessMm,
              cortical_thickness_mm(*subregions, organ == OrganId::RightKidney
                                                     ? KidneySide::Right
                                                     : KidneySide::Left));
      }
      break;
    case OrganId::Liver:
      if (subregions) {
        const auto [r, l] = lobe_volumes_cc(*subregions);
        m.set(Quantity::RightLobeCc, r);
        m.set(Quantity::LeftLobeCc, l);
      }
      break;
    case OrganId::Spleen:
      m.set(Quantity::SurfaceAreaCm2, surface_area_cm2(mask, organ));
      break;
    case OrganId::Prostate:
      m.set(Quantity::ApDiameterMm, ap_diameter_mm(mask, organ));
      break;
  }
  return g;
}

}  // namespace ctm::geo
