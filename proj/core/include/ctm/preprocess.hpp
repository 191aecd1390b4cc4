#pragma once

#include <vector>

#include "ctm/grid.hpp"

namespace ctm::prep {

inline constexpr double kDefaultTargetMm = 1.5;

/// Patch dims and stride in voxels. Stride may be smaller than the patch (overlap).
struct PatchSpec {
  Dims patch{64, 64, 32};
  Dims stride{32, 32, 16};

  PatchSpec() = default;
  PatchSpec(Dims p, Dims s);
  static PatchSpec non_overlapping(Dims p) { return PatchSpec(p, p); }
};

/// Output geometry for resampling to `target_mm`: dims round(n*d/t) (at least 1),
/// physical extent start preserved.
GridGeometry isotropic_geometry(const GridGeometry& in, double target_mm);

/// Trilinear resampling at output voxel centers, clamp-to-edge outside the input.
VoxelGrid resample_isotropic(const VoxelGrid& grid, double target_mm = kDefaultTargetMm);

/// Nearest-neighbour resampling with the same geometry rule as the image path.
LabelMask resample_mask(const LabelMask& mask, double target_mm = kDefaultTargetMm);
SubregionMask resample_mask(const SubregionMask& mask, double target_mm = kDefaultTargetMm);

/// (v - mean) / std with population std; all zeros when std < 1e-8.
VoxelGrid zscore_normalize(const VoxelGrid& grid);

/// Corners along one axis: stride multiples plus a final corner ending at the edge.
std::vector<int> axis_corners(int n, int patch, int stride);

/// All patch corners, z-major (z outermost, x innermost).
std::vector<Index3> patch_corners(const Dims& dims, const PatchSpec& spec);

/// Copies a patch starting at `corner`; voxels past the grid edge replicate the border.
template <class T, class Codes>
Volume<T, Codes> extract_patch(const Volume<T, Codes>& grid, const Index3& corner,
                               const Dims& patch) {
  GridGeometry g;
  g.dims = patch;
  g.spacing = grid.spacing();
  g.origin = grid.geometry().world(corner);
  std::vector<T> out;
  out.reserve(patch.count());
  const Dims& d = grid.dims();
  auto clampi = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  for (int z = 0; z < patch.nz; ++z) {
    const int sz = clampi(corner.z + z, d.nz);
    for (int y = 0; y < patch.ny; ++y) {
      const int sy = clampi(corner.y + y, d.ny);
      for (int x = 0; x < patch.nx; ++x) {
        out.push_back(grid.at(clampi(corner.x + x, d.nx), sy, sz));
      }
    }
  }
  return Volume<T, Codes>(g, std::move(out));
}

struct Patch {
  Index3 corner;
  VoxelGrid grid;
};

std::vector<Patch> extract_patches(const VoxelGrid& grid, const PatchSpec& spec);

/// Accumulates multi-channel patch values and divides by the per-voxel
/// coverage count (uniform overlap averaging).
class PatchAccumulator {
 public:
  PatchAccumulator(const Dims& dims, int channels);

  /// `values` holds `channels` blocks of patch.count() values, x-fastest.
  void add(const Index3& corner, const Dims& patch, const std::vector<float>& values);

  /// Averaged values, channel-major. Voxels never covered stay zero.
  std::vector<float> finish() const;
  const Dims& dims() const { return dims_; }
  int channels() const { return channels_; }

 private:
  Dims dims_;
  int channels_;
  std::vector<double> sum_;
  std::vector<std::uint32_t> count_;
};

}  // namespace ctm::prep
