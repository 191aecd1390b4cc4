#pragma once

// Model-free measurement of organ masks.

#include <optional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"
#include "ctm/measurements.hpp"

namespace ctm::geo {

/// Face counting overestimates the area of smooth surfaces by about this factor.
inline constexpr double kSurfaceInflation = 1.5;

enum class KidneySide { Right, Left };

/// Labeled-voxel count times voxel volume, in cc; nullopt when the organ is absent.
std::optional<double> organ_volume_cc(const LabelMask& mask, OrganId organ);

/// Principal-axis extent of voxel centers plus the spacing along that axis.
/// nullopt with fewer than two voxels.
std::optional<double> organ_length_mm(const LabelMask& mask, OrganId organ);

/// Extent along z (craniocaudal), including one voxel of spacing.
std::optional<double> z_extent_mm(const LabelMask& mask, OrganId organ);

/// Extent along +y (anteroposterior), including one voxel of spacing.
std::optional<double> ap_diameter_mm(const LabelMask& mask, OrganId organ);

/// Sum of voxel faces adjoining a non-organ voxel or the grid boundary, in cm^2.
std::optional<double> surface_area_cm2(const LabelMask& mask, OrganId organ);

/// Distance (mm) from each voxel to the nearest background voxel center, where
/// background is `region[i] == 0`. Voxels outside the grid are not background;
/// every entry is +inf when the grid has no background voxel.
std::vector<double> euclidean_distance_transform(const std::vector<std::uint8_t>& region,
                                                 const Dims& dims, const Spacing& spacing);

/// Twice the mean medial distance of the cortex region. Medial voxels are local
/// maxima of the distance transform over their six face neighbours that fall off
/// along at least one axis; distances are measured to
/// the voxel boundary (half a spacing short of the background center), and a
/// two-voxel ridge counts its midpoint.
std::optional<double> cortical_thickness_mm(const SubregionMask& subregions, KidneySide side);

/// (right lobe cc, left lobe cc).
std::pair<std::optional<double>, std::optional<double>> lobe_volumes_cc(
    const SubregionMask& subregions);

struct GeoMeasurements {
  Measurements values;
  std::optional<double> z_extent_mm;  // reported next to the principal-axis length

  nlohmann::json to_json(OrganId organ) const;
};

/// Every quantity of `organ` computed from the masks. `subregions` may be null,
/// leaving cortex and lobe quantities absent.
GeoMeasurements measure_organ(const LabelMask& mask, const SubregionMask* subregions,
                              OrganId organ);

}  // namespace ctm::geo
