#include "ctm/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace ctm::prep {

PatchSpec::PatchSpec(Dims p, Dims s) : patch(p), stride(s) {
  for (int a = 0; a < 3; ++a) {
    if (stride[a] > patch[a]) {
      throw ParameterError("patch stride must not exceed patch dims");
    }
  }
}

GridGeometry isotropic_geometry(const GridGeometry& in, double target_mm) {
  if (!(target_mm > 0.0)) throw ParameterError("resampling target must be positive");
  GridGeometry out;
  int n[3];
  for (int a = 0; a < 3; ++a) {
    const double exact = in.dims[a] * in.spacing[a] / target_mm;
    n[a] = std::max(1, static_cast<int>(std::lround(exact)));
    out.origin[a] = in.origin[a] - 0.5 * in.spacing[a] + 0.5 * target_mm;
  }
  out.dims = Dims(n[0], n[1], n[2]);
  out.spacing = Spacing(target_mm, target_mm, target_mm);
  return out;
}

namespace {

bool already_isotropic(const GridGeometry& g, double target_mm) {
  return g.spacing.dx == target_mm && g.spacing.dy == target_mm && g.spacing.dz == target_mm;
}

// Continuous input index of output voxel i along one axis.
double source_coordinate(int i, double in_spacing, double target_mm) {
  return (i + 0.5) * (target_mm / in_spacing) - 0.5;
}

template <class V>
V resample_nearest(const V& mask, double target_mm) {
  const GridGeometry og = isotropic_geometry(mask.geometry(), target_mm);
  if (already_isotropic(mask.geometry(), target_mm)) return mask;
  const Dims& id = mask.dims();
  std::vector<int> src[3];
  for (int a = 0; a < 3; ++a) {
    src[a].resize(og.dims[a]);
    for (int i = 0; i < og.dims[a]; ++i) {
      const double c = source_coordinate(i, mask.spacing()[a], target_mm);
      src[a][i] = std::clamp(static_cast<int>(std::floor(c + 0.5)), 0, id[a] - 1);
    }
  }
  std::vector<typename V::value_type> out;
  out.reserve(og.dims.count());
  for (int z = 0; z < og.dims.nz; ++z) {
    for (int y = 0; y < og.dims.ny; ++y) {
      for (int x = 0; x < og.dims.nx; ++x) {
        out.push_back(mask.at(src[0][x], src[1][y], src[2][z]));
      }
    }
  }
  return V(og, std::move(out));
}

struct Tap {
  int i0;
  int i1;
  double f;
};

}  // namespace

VoxelGrid resample_isotropic(const VoxelGrid& grid, double target_mm) {
  const GridGeometry og = isotropic_geometry(grid.geometry(), target_mm);
  if (already_isotropic(grid.geometry(), target_mm)) return grid;
  const Dims& id = grid.dims();
  std::vector<Tap> taps[3];
  for (int a = 0; a < 3; ++a) {
    taps[a].resize(og.dims[a]);
    for (int i = 0; i < og.dims[a]; ++i) {
      double c = source_coordinate(i, grid.spacing()[a], target_mm);
      c = std::clamp(c, 0.0, static_cast<double>(id[a] - 1));
      const int i0 = static_cast<int>(std::floor(c));
      const int i1 = std::min(i0 + 1, id[a] - 1);
      taps[a][i] = {i0, i1, c - i0};
    }
  }
  std::vector<float> out;
  out.reserve(og.dims.count());
  for (int z = 0; z < og.dims.nz; ++z) {
    const Tap& tz = taps[2][z];
    for (int y = 0; y < og.dims.ny; ++y) {
      const Tap& ty = taps[1][y];
      for (int x = 0; x < og.dims.nx; ++x) {
        const Tap& tx = taps[0][x];
        auto v = [&](int xi, int yi, int zi) -> double { return grid.at(xi, yi, zi); };
        const double c00 = v(tx.i0, ty.i0, tz.i0) * (1 - tx.f) + v(tx.i1, ty.i0, tz.i0) * tx.f;
        const double c10 = v(tx.i0, ty.i1, tz.i0) * (1 - tx.f) + v(tx.i1, ty.i1, tz.i0) * tx.f;
        const double c01 = v(tx.i0, ty.i0, tz.i1) * (1 - tx.f) + v(tx.i1, ty.i0, tz.i1) * tx.f;
        const double c11 = v(tx.i0, ty.i1, tz.i1) * (1 - tx.f) + v(tx.i1, ty.i1, tz.i1) * tx.f;
        const double c0 = c00 * (1 - ty.f) + c10 * ty.f;
        const double c1 = c01 * (1 - ty.f) + c11 * ty.f;
        out.push_back(static_cast<float>(c0 * (1 - tz.f) + c1 * tz.f));
      }
    }
  }
  return VoxelGrid(og, std::move(out));
}

LabelMask resample_mask(const LabelMask& mask, double target_mm) {
  return resample_nearest(mask, target_mm);
}

SubregionMask resample_mask(const SubregionMask& mask, double target_mm) {
  return resample_nearest(mask, target_mm);
}

VoxelGrid zscore_normalize(const VoxelGrid& grid) {
  const auto& v = grid.values();
  double sum = 0.0;
  for (float x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (float x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size()));
  std::vector<float> out(v.size(), 0.0f);
  if (sd >= 1e-8) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      out[i] = static_cast<float>((v[i] - mean) / sd);
    }
  }
  return VoxelGrid(grid.geometry(), std::move(out));
}

std::vector<int> axis_corners(int n, int patch, int stride) {
  if (patch < 1 || stride < 1) throw ParameterError("patch and stride must be >= 1");
  std::vector<int> corners;
  if (n <= patch) return {0};
  for (int c = 0; c + patch <= n; c += stride) corners.push_back(c);
  if (corners.back() + patch < n) corners.push_back(n - patch);
  return corners;
}

std::vector<Index3> patch_corners(const Dims& dims, const PatchSpec& spec) {
  const auto cx = axis_corners(dims.nx, spec.patch.nx, spec.stride.nx);
  const auto cy = axis_corners(dims.ny, spec.patch.ny, spec.stride.ny);
  const auto cz = axis_corners(dims.nz, spec.patch.nz, spec.stride.nz);
  std::vector<Index3> out;
  out.reserve(cx.size() * cy.size() * cz.size());
  for (int z : cz) {
    for (int y : cy) {
      for (int x : cx) out.push_back({x, y, z});
    }
  }
  return out;
}

std::vector<Patch> extract_patches(const VoxelGrid& grid, const PatchSpec& spec) {
  std::vector<Patch> out;
  for (const Index3& c : patch_corners(grid.dims(), spec)) {
    out.push_back({c, extract_patch(grid, c, spec.patch)});
  }
  return out;
}

PatchAccumulator::PatchAccumulator(const Dims& dims, int channels)
    : dims_(dims),
      channels_(channels),
      sum_(dims.count() * static_cast<std::size_t>(channels), 0.0),
      count_(dims.count(), 0) {}

void PatchAccumulator::add(const Index3& corner, const Dims& patch,
                           const std::vector<float>& values) {
  const std::size_t pv = patch.count();
  if (values.size() != pv * static_cast<std::size_t>(channels_)) {
    throw ShapeError("patch accumulator: value count does not match patch dims");
  }
  const std::size_t nv = dims_.count();
  for (int z = 0; z < patch.nz; ++z) {
    const int gz = corner.z + z;
    if (gz < 0 || gz >= dims_.nz) continue;
    for (int y = 0; y < patch.ny; ++y) {
      const int gy = corner.y + y;
      if (gy < 0 || gy >= dims_.ny) continue;
      for (int x = 0; x < patch.nx; ++x) {
        const int gx = corner.x + x;
        if (gx < 0 || gx >= dims_.nx) continue;
        const std::size_t gi = dims_.index(gx, gy, gz);
        const std::size_t pi = patch.index(x, y, z);
        ++count_[gi];
        for (int c = 0; c < channels_; ++c) sum_[c * nv + gi] += values[c * pv + pi];
      }
    }
  }
}

std::vector<float> PatchAccumulator::finish() const {
  const std::size_t nv = dims_.count();
  std::vector<float> out(sum_.size(), 0.0f);
  for (int c = 0; c < channels_; ++c) {
    for (std::size_t i = 0; i < nv; ++i) {
      if (count_[i] > 0) out[c * nv + i] = static_cast<float>(sum_[c * nv + i] / count_[i]);
    }
  }
  return out;
}

}  // namespace ctm::prep
