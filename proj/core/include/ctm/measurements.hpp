#pragma once

// Per-organ measured quantities shared by the geometric and learned paths.

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"

namespace ctm {

enum class Quantity : int {
  VolumeCc = 0,
  LengthMm,
  CorticalThicknessMm,
  RightLobeCc,
  LeftLobeCc,
  SurfaceAreaCm2,
  ApDiameterMm,
};

inline constexpr int kNumQuantities = 7;

std::string_view quantity_name(Quantity q);

/// Quantities reported for an organ, in output order.
const std::vector<Quantity>& quantities_for(OrganId organ);

/// Fixed scale dividing a raw value into normalized units:
/// volumes 1000 cc, lengths 200 mm, areas 500 cm^2.
double normalization_scale(Quantity q);

struct Measurements {
  std::array<std::optional<double>, kNumQuantities> values{};

  std::optional<double> get(Quantity q) const { return values[static_cast<int>(q)]; }
  void set(Quantity q, std::optional<double> v) { values[static_cast<int>(q)] = v; }

  /// Object keyed by quantity name for the organ's quantities; absent values are null.
  nlohmann::json to_json(OrganId organ) const;
  static Measurements from_json(const nlohmann::json& j);
  bool operator==(const Measurements&) const = default;
};

}  // namespace ctm
