#include "ctm/measurements.hpp"

#include <string>

namespace ctm {

std::string_view quantity_name(Quantity q) {
  switch (q) {
    case Quantity::VolumeCc: return "volume_cc";
    case Quantity::LengthMm: return "length_mm";
    case Quantity::CorticalThicknessMm: return "cortical_thickness_mm";
    case Quantity::RightLobeCc: return "right_lobe_volume_cc";
    case Quantity::LeftLobeCc: return "left_lobe_volume_cc";
    case Quantity::SurfaceAreaCm2: return "surface_area_cm2";
    case Quantity::ApDiameterMm: return "ap_diameter_mm";
  }
  throw ParameterError("unknown quantity");
}

const std::vector<Quantity>& quantities_for(OrganId organ) {
  static const std::vector<Quantity> kidney = {Quantity::VolumeCc, Quantity::LengthMm,
                                               Quantity::CorticalThicknessMm};
  static const std::vector<Quantity> liver = {Quantity::VolumeCc, Quantity::RightLobeCc,
                                              Quantity::LeftLobeCc};
  static const std::vector<Quantity> spleen = {Quantity::VolumeCc, Quantity::SurfaceAreaCm2};
  static const std::vector<Quantity> prostate = {Quantity::VolumeCc, Quantity::ApDiameterMm};
  switch (organ) {
    case OrganId::RightKidney:
    case OrganId::LeftKidney: return kidney;
    case OrganId::Liver: return liver;
    case OrganId::Spleen: return spleen;
    case OrganId::Prostate: return prostate;
  }
  throw ParameterError("unknown organ");
}

double normalization_scale(Quantity q) {
  switch (q) {
    case Quantity::VolumeCc:
    case Quantity::RightLobeCc:
    case Quantity::LeftLobeCc: return 1000.0;
    case Quantity::LengthMm:
    case Quantity::CorticalThicknessMm:
    case Quantity::ApDiameterMm: return 200.0;
    case Quantity::SurfaceAreaCm2: return 500.0;
  }
  throw ParameterError("unknown quantity");
}

nlohmann::json Measurements::to_json(OrganId organ) const {
  nlohmann::json j = nlohmann::json::object();
  for (Quantity q : quantities_for(organ)) {
    const auto v = get(q);
    j[std::string(quantity_name(q))] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return j;
}

Measurements Measurements::from_json(const nlohmann::json& j) {
  Measurements m;
  for (int i = 0; i < kNumQuantities; ++i) {
    const auto q = static_cast<Quantity>(i);
    const auto it = j.find(std::string(quantity_name(q)));
    if (it != j.end() && !it->is_null()) m.set(q, it->get<double>());
  }
  return m;
}

}  // namespace ctm
