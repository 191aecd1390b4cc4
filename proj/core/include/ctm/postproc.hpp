#pragma once

// Connected components and small-component removal on label masks.

#include <cstdint>
#include <vector>

#include "ctm/grid.hpp"

namespace ctm::post {

inline constexpr int kDefaultMinVoxels = 100;

struct Component {
  std::uint8_t label = 0;
  std::int64_t voxels = 0;
  Box3D box;
  std::size_t first_index = 0;  // smallest linear index in the component
};

/// Component id per voxel (0 = background) with dense ids 1..K.
struct ComponentSet {
  Dims dims;
  std::vector<std::uint32_t> ids;
  std::vector<Component> components;  // components[k - 1] describes id k

  std::size_t size() const { return components.size(); }
  const Component& component(std::uint32_t id) const { return components.at(id - 1); }
};

/// Labels each organ independently under 6- or 26-connectivity. Ids follow the
/// order in which a component's first voxel appears in a linear scan.
ComponentSet connected_components(const LabelMask& mask, int connectivity = 26);

/// Resets every component with fewer than `min_voxels` voxels to background.
LabelMask remove_small_components(const LabelMask& mask, int min_voxels = kDefaultMinVoxels,
                                  int connectivity = 26);

/// Keeps only the largest component of `organ`; equal sizes go to the lower id.
LabelMask keep_largest_component(const LabelMask& mask, OrganId organ, int connectivity = 26);

}  // namespace ctm::post
