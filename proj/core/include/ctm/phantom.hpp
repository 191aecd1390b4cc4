#pragma once

// Synthetic abdomen phantoms built from ellipsoids with analytic ground truth.
//
// World coordinates (mm) run from 0 at the low face of voxel 0 to the physical
// extent of the grid; voxel centers sit at (i + 0.5) * spacing. The organ
// layout occupies a 192 mm cube centred in the field of view.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"
#include "ctm/measurements.hpp"

namespace ctm::phantom {

inline constexpr double kLayoutExtentMm = 192.0;

struct Intensities {
  double background = 0.0;
  double liver = 60.0;
  double kidney = 30.0;
  double spleen = 50.0;
  double prostate = 40.0;

  double of(OrganId organ) const;
  bool operator==(const Intensities&) const = default;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  Dims dims{128, 128, 128};
  Spacing spacing{1.5, 1.5, 1.5};
  double noise_sigma = 5.0;
  double center_jitter_mm = 3.0;   // uniform in [-j, j] per axis
  double radius_jitter = 0.08;     // radii scaled by a factor in [1 - r, 1 + r]
  double cortex_thickness_mm = 5.0;
  Intensities intensity{};

  void validate() const;
  nlohmann::json to_json() const;  // seed excluded
  static PhantomSpec from_json(const nlohmann::json& j);
  bool operator==(const PhantomSpec&) const = default;
};

struct Ellipsoid {
  Vec3 center;  // mm
  Vec3 radii;   // mm

  double volume_mm3() const;
  double surface_area_mm2() const;
  /// Volume of the part with x >= plane.
  double volume_above_x_mm3(double plane) const;
  bool contains(const Vec3& p) const;
};

struct OrganTruth {
  Measurements values;   // analytic reference values
  Box3D box;             // voxelized extent
  std::vector<Ellipsoid> shapes;
};

struct PhantomTruth {
  LabelMask labels;
  SubregionMask subregions;
  std::map<OrganId, OrganTruth> organs;
  double liver_split_x_mm = 0.0;  // right lobe below, left lobe at or above

  /// Analytic values and boxes; the masks are stored separately.
  nlohmann::json to_json() const;
};

struct Phantom {
  VoxelGrid image;
  PhantomTruth truth;
};

/// Fully determined by `spec` (including its seed).
Phantom generate_phantom(const PhantomSpec& spec);

struct DatasetEntry {
  std::string id;
  std::uint64_t seed = 0;
  std::filesystem::path image_stem;
  std::filesystem::path labels_stem;
  std::filesystem::path subregions_stem;
  std::filesystem::path truth_path;
};

/// Writes `count` phantoms (seed = base_seed + index) and manifest.json into
/// `dir`. Stems are relative to `dir`. Output does not depend on `threads`.
std::vector<DatasetEntry> generate_dataset(int count, std::uint64_t base_seed,
                                           const PhantomSpec& spec,
                                           const std::filesystem::path& dir, int threads = 1);

std::string case_id(int index);

/// Reads the analytic values and boxes back from a truth file.
std::map<OrganId, OrganTruth> read_truth(const std::filesystem::path& path);

}  // namespace ctm::phantom
