#pragma once

// Voxel-grid data model shared by every module.
//
// Axis convention is LPS: +x toward patient left, +y toward posterior,
// +z toward superior. Storage is x-fastest: index = x + nx * (y + ny * z).

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctm/error.hpp"

namespace ctm {

struct Spacing {
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;

  Spacing() = default;
  Spacing(double x, double y, double z);

  double operator[](int axis) const { return axis == 0 ? dx : (axis == 1 ? dy : dz); }
  bool operator==(const Spacing&) const = default;
};

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;

  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  int& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Index3&) const = default;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Vec3&) const = default;
};

struct Dims {
  int nx = 1;
  int ny = 1;
  int nz = 1;

  Dims() = default;
  Dims(int x, int y, int z);

  int operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool contains(const Index3& p) const {
    return p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x < nx && p.y < ny && p.z < nz;
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
  }
  Index3 coords(std::size_t i) const {
    const auto sx = static_cast<std::size_t>(nx);
    const auto sy = static_cast<std::size_t>(ny);
    return {static_cast<int>(i % sx), static_cast<int>((i / sx) % sy),
            static_cast<int>(i / (sx * sy))};
  }
  bool operator==(const Dims&) const = default;
};

/// Dims, spacing and origin; origin is the world position (mm) of voxel (0,0,0).
struct GridGeometry {
  Dims dims;
  Spacing spacing;
  Vec3 origin;

  Vec3 world(const Index3& p) const {
    return {origin.x + p.x * spacing.dx, origin.y + p.y * spacing.dy,
            origin.z + p.z * spacing.dz};
  }
  bool operator==(const GridGeometry&) const = default;
};

/// Half-open axis-aligned box in voxel index space: lo inclusive, hi exclusive.
class Box3D {
 public:
  Box3D() : lo_{0, 0, 0}, hi_{1, 1, 1} {}
  Box3D(Index3 lo, Index3 hi);

  const Index3& lo() const { return lo_; }
  const Index3& hi() const { return hi_; }
  int extent(int axis) const { return hi_[axis] - lo_[axis]; }
  std::int64_t volume() const {
    return static_cast<std::int64_t>(extent(0)) * extent(1) * extent(2);
  }
  double center(int axis) const { return 0.5 * (lo_[axis] + hi_[axis]); }
  bool contains(const Index3& p) const {
    for (int a = 0; a < 3; ++a) {
      if (p[a] < lo_[a] || p[a] >= hi_[a]) return false;
    }
    return true;
  }
  bool contains(const Box3D& other) const;
  /// True when the box lies inside [0, dims).
  bool within(const Dims& dims) const;
  bool operator==(const Box3D&) const = default;

 private:
  Index3 lo_;
  Index3 hi_;
};

enum class OrganId : std::uint8_t {
  Liver = 1,
  RightKidney = 2,
  LeftKidney = 3,
  Spleen = 4,
  Prostate = 5,
};

inline constexpr std::array<OrganId, 5> kAllOrgans = {
    OrganId::Liver, OrganId::RightKidney, OrganId::LeftKidney, OrganId::Spleen,
    OrganId::Prostate};

/// Row order of the published per-organ results table.
inline constexpr std::array<OrganId, 5> kReportOrder = {
    OrganId::RightKidney, OrganId::LeftKidney, OrganId::Liver, OrganId::Spleen,
    OrganId::Prostate};

inline constexpr std::uint8_t label_of(OrganId organ) {
  return static_cast<std::uint8_t>(organ);
}
OrganId organ_from_label(std::uint8_t label);
std::string_view organ_name(OrganId organ);
OrganId organ_from_name(std::string_view name);

/// Subregion codes stored in a SubregionMask.
enum class Subregion : std::uint8_t {
  None = 0,
  LiverRightLobe = 1,
  LiverLeftLobe = 2,
  RightKidneyCortex = 3,
  LeftKidneyCortex = 4,
};

struct ScalarCodes {
  static constexpr bool kCategorical = false;
  static constexpr int kMaxCode = 0;
  static constexpr const char* kKind = "scalar";
};
struct LabelCodes {
  static constexpr bool kCategorical = true;
  static constexpr int kMaxCode = 5;
  static constexpr const char* kKind = "label";
};
struct SubregionCodes {
  static constexpr bool kCategorical = true;
  static constexpr int kMaxCode = 4;
  static constexpr const char* kKind = "subregion";
};

/// Dense 3D volume. Categorical variants validate their codes on construction.
template <class T, class Codes>
class Volume {
 public:
  using value_type = T;
  using codes = Codes;

  Volume() : data_(1, T{}) {}
  explicit Volume(const GridGeometry& geometry, T fill = T{})
      : geometry_(geometry), data_(geometry.dims.count(), fill) {
    validate();
  }
  Volume(const GridGeometry& geometry, std::vector<T> data)
      : geometry_(geometry), data_(std::move(data)) {
    if (data_.size() != geometry_.dims.count()) {
      throw ShapeError("volume data length " + std::to_string(data_.size()) +
                       " does not match dims " + std::to_string(geometry_.dims.count()));
    }
    validate();
  }

  const GridGeometry& geometry() const { return geometry_; }
  const Dims& dims() const { return geometry_.dims; }
  const Spacing& spacing() const { return geometry_.spacing; }
  const Vec3& origin() const { return geometry_.origin; }
  std::size_t size() const { return data_.size(); }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T at(int x, int y, int z) const { return data_[geometry_.dims.index(x, y, z)]; }
  T& at(int x, int y, int z) { return data_[geometry_.dims.index(x, y, z)]; }
  T at(const Index3& p) const { return at(p.x, p.y, p.z); }
  T& at(const Index3& p) { return at(p.x, p.y, p.z); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const std::vector<T>& values() const { return data_; }

  /// Throws ValidationError if a categorical code is out of range.
  void validate() const {
    if constexpr (Codes::kCategorical) {
      for (std::size_t i = 0; i < data_.size(); ++i) {
        if (data_[i] > Codes::kMaxCode) {
          throw ValidationError(std::string(Codes::kKind) + " code " +
                                std::to_string(static_cast<int>(data_[i])) +
                                " out of range at index " + std::to_string(i));
        }
      }
    }
  }

  bool operator==(const Volume&) const = default;

 private:
  GridGeometry geometry_;
  std::vector<T> data_;
};

using VoxelGrid = Volume<float, ScalarCodes>;
using LabelMask = Volume<std::uint8_t, LabelCodes>;
using SubregionMask = Volume<std::uint8_t, SubregionCodes>;

double voxel_volume_mm3(const Spacing& spacing);

/// Tightest box around every voxel equal to `code`; nullopt when none.
template <class T, class Codes>
std::optional<Box3D> bounding_box_of_code(const Volume<T, Codes>& mask, T code) {
  const Dims& d = mask.dims();
  Index3 lo{d.nx, d.ny, d.nz};
  Index3 hi{-1, -1, -1};
  bool found = false;
  std::size_t i = 0;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x, ++i) {
        if (mask[i] != code) continue;
        found = true;
        if (x < lo.x) lo.x = x;
        if (y < lo.y) lo.y = y;
        if (z < lo.z) lo.z = z;
        if (x > hi.x) hi.x = x;
        if (y > hi.y) hi.y = y;
        if (z > hi.z) hi.z = z;
      }
    }
  }
  if (!found) return std::nullopt;
  return Box3D(lo, {hi.x + 1, hi.y + 1, hi.z + 1});
}

std::optional<Box3D> bounding_box_of(const LabelMask& mask, OrganId organ);

/// Copies the voxels inside `box`; the origin moves by lo * spacing.
template <class T, class Codes>
Volume<T, Codes> crop(const Volume<T, Codes>& grid, const Box3D& box) {
  if (!box.within(grid.dims())) {
    throw BoundsError("crop box outside grid");
  }
  GridGeometry g;
  g.dims = Dims(box.extent(0), box.extent(1), box.extent(2));
  g.spacing = grid.spacing();
  g.origin = grid.geometry().world(box.lo());
  std::vector<T> out;
  out.reserve(g.dims.count());
  for (int z = box.lo().z; z < box.hi().z; ++z) {
    for (int y = box.lo().y; y < box.hi().y; ++y) {
      const std::size_t row = grid.dims().index(box.lo().x, y, z);
      for (int x = 0; x < g.dims.nx; ++x) out.push_back(grid[row + x]);
    }
  }
  return Volume<T, Codes>(g, std::move(out));
}

/// Voxels carrying `organ` as a 0/1 membership vector.
std::vector<std::uint8_t> organ_membership(const LabelMask& mask, OrganId organ);

/// Intersection-over-union of two integer boxes.
double box_iou_3d(const Box3D& a, const Box3D& b);

}  // namespace ctm
