#include "ctm/grid.hpp"

#include <algorithm>

namespace ctm {

Spacing::Spacing(double x, double y, double z) : dx(x), dy(y), dz(z) {
  if (!(dx > 0.0) || !(dy > 0.0) || !(dz > 0.0)) {
    throw ParameterError("spacing must be positive on every axis");
  }
}

Dims::Dims(int x, int y, int z) : nx(x), ny(y), nz(z) {
  if (nx < 1 || ny < 1 || nz < 1) {
    throw ParameterError("dims must be >= 1 on every axis");
  }
}

Box3D::Box3D(Index3 lo, Index3 hi) : lo_(lo), hi_(hi) {
  for (int a = 0; a < 3; ++a) {
    if (lo_[a] >= hi_[a]) {
      throw ParameterError("Box3D requires lo < hi on every axis");
    }
  }
}

bool Box3D::contains(const Box3D& other) const {
  for (int a = 0; a < 3; ++a) {
    if (other.lo_[a] < lo_[a] || other.hi_[a] > hi_[a]) return false;
  }
  return true;
}

bool Box3D::within(const Dims& dims) const {
  for (int a = 0; a < 3; ++a) {
    if (lo_[a] < 0 || hi_[a] > dims[a]) return false;
  }
  return true;
}

OrganId organ_from_label(std::uint8_t label) {
  if (label < 1 || label > 5) {
    throw ParameterError("label " + std::to_string(label) + " is not an organ");
  }
  return static_cast<OrganId>(label);
}

std::string_view organ_name(OrganId organ) {
  switch (organ) {
    case OrganId::Liver:
      return "Liver";
    case OrganId::RightKidney:
      return "RightKidney";
    case OrganId::LeftKidney:
      return "LeftKidney";
    case OrganId::Spleen:
      return "Spleen";
    case OrganId::Prostate:
      return "Prostate";
  }
  return "Unknown";
}

OrganId organ_from_name(std::string_view name) {
  for (OrganId o : kAllOrgans) {
    if (organ_name(o) == name) return o;
  }
  throw ParameterError("unknown organ name '" + std::string(name) + "'");
}

double voxel_volume_mm3(const Spacing& spacing) {
  return spacing.dx * spacing.dy * spacing.dz;
}

std::optional<Box3D> bounding_box_of(const LabelMask& mask, OrganId organ) {
  return bounding_box_of_code(mask, label_of(organ));
}

std::vector<std::uint8_t> organ_membership(const LabelMask& mask, OrganId organ) {
  const std::uint8_t code = label_of(organ);
  std::vector<std::uint8_t> out(mask.size());
  std::transform(mask.values().begin(), mask.values().end(), out.begin(),
                 [code](std::uint8_t v) { return static_cast<std::uint8_t>(v == code); });
  return out;
}

double box_iou_3d(const Box3D& a, const Box3D& b) {
  std::int64_t inter = 1;
  for (int ax = 0; ax < 3; ++ax) {
    const int lo = std::max(a.lo()[ax], b.lo()[ax]);
    const int hi = std::min(a.hi()[ax], b.hi()[ax]);
    if (hi <= lo) return 0.0;
    inter *= hi - lo;
  }
  const double uni = static_cast<double>(a.volume() + b.volume() - inter);
  return static_cast<double>(inter) / uni;
}

}  // namespace ctm
