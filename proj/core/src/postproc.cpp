#include "ctm/postproc.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>

namespace ctm::post {

namespace {

struct Offset {
  int dx, dy, dz;
};

std::vector<Offset> neighbourhood(int connectivity) {
  if (connectivity != 6 && connectivity != 26) {
    throw ParameterError("connectivity must be 6 or 26, got " + std::to_string(connectivity));
  }
  std::vector<Offset> out;
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == 6 && manhattan != 1) continue;
        out.push_back({dx, dy, dz});
      }
    }
  }
  return out;
}

}  // namespace

ComponentSet connected_components(const LabelMask& mask, int connectivity) {
  const auto nbrs = neighbourhood(connectivity);
  const Dims& d = mask.dims();
  ComponentSet set;
  set.dims = d;
  set.ids.assign(d.count(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < d.count(); ++start) {
    const std::uint8_t label = mask[start];
    if (label == 0 || set.ids[start] != 0) continue;
    const auto id = static_cast<std::uint32_t>(set.components.size() + 1);
    Component comp;
    comp.label = label;
    comp.first_index = start;
    Index3 lo = d.coords(start);
    Index3 hi = lo;
    set.ids[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++comp.voxels;
      const Index3 p = d.coords(cur);
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
      for (const auto& o : nbrs) {
        const Index3 q{p.x + o.dx, p.y + o.dy, p.z + o.dz};
        if (!d.contains(q)) continue;
        const std::size_t qi = d.index(q.x, q.y, q.z);
        if (mask[qi] != label || set.ids[qi] != 0) continue;
        set.ids[qi] = id;
        stack.push_back(qi);
      }
    }
    comp.box = Box3D(lo, {hi.x + 1, hi.y + 1, hi.z + 1});
    set.components.push_back(comp);
  }
  return set;
}

LabelMask remove_small_components(const LabelMask& mask, int min_voxels, int connectivity) {
  const ComponentSet set = connected_components(mask, connectivity);
  LabelMask out = mask;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint32_t id = set.ids[i];
    if (id != 0 && set.component(id).voxels < min_voxels) out[i] = 0;
  }
  return out;
}

LabelMask keep_largest_component(const LabelMask& mask, OrganId organ, int connectivity) {
  const ComponentSet set = connected_components(mask, connectivity);
  const std::uint8_t label = label_of(organ);
  std::uint32_t best = 0;
  std::int64_t best_voxels = -1;
  for (std::uint32_t id = 1; id <= set.size(); ++id) {
    const Component& c = set.component(id);
    if (c.label == label && c.voxels > best_voxels) {
      best = id;
      best_voxels = c.voxels;
    }
  }
  LabelMask out = mask;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == label && set.ids[i] != best) out[i] = 0;
  }
  return out;
}

}  // namespace ctm::post
