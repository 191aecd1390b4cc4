#include "ctm/phantom.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <thread>

#include "ctm/io.hpp"
#include "ctm/rng.hpp"

namespace ctm::phantom {

namespace {

constexpr double kPi = std::numbers::pi;

// Nominal layout in the 192 mm layout cube (LPS: x toward patient left,
// y toward posterior, z toward superior). The ranges are sized so that every
// jittered bounding box stays disjoint from the others, except the two liver
// lobes, which overlap by design.
struct Nominal {
  Vec3 center;
  Vec3 radii;
};
constexpr Nominal kLiverRight{{60, 85, 145}, {30, 28, 24}};
constexpr Nominal kLiverLeft{{98, 78, 148}, {22, 20, 16}};
constexpr Nominal kSpleen{{155, 105, 140}, {14, 22, 20}};
constexpr Nominal kRightKidney{{60, 120, 76}, {18, 20, 32}};
constexpr Nominal kLeftKidney{{132, 120, 76}, {18, 20, 32}};
constexpr Nominal kProstate{{96, 70, 28}, {18, 16, 15}};

nlohmann::json vec_json(const Vec3& v) { return {v.x, v.y, v.z}; }
Vec3 vec_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

Ellipsoid draw(const Nominal& n, const PhantomSpec& spec, const Vec3& offset, Rng& rng) {
  Ellipsoid e;
  for (int a = 0; a < 3; ++a) {
    e.center[a] = offset[a] + n.center[a] + rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm);
    e.radii[a] = n.radii[a] * rng.uniform(1.0 - spec.radius_jitter, 1.0 + spec.radius_jitter);
  }
  return e;
}

Ellipsoid shrink(const Ellipsoid& e, double t) {
  return {e.center, {e.radii.x - t, e.radii.y - t, e.radii.z - t}};
}

}  // namespace

double Intensities::of(OrganId organ) const {
  switch (organ) {
    case OrganId::Liver: return liver;
    case OrganId::RightKidney:
    case OrganId::LeftKidney: return kidney;
    case OrganId::Spleen: return spleen;
    case OrganId::Prostate: return prostate;
  }
  return background;
}

double Ellipsoid::volume_mm3() const { return 4.0 / 3.0 * kPi * radii.x * radii.y * radii.z; }

double Ellipsoid::surface_area_mm2() const {
  // Midpoint quadrature of |r_theta x r_phi| over the parametric sphere.
  constexpr int nt = 600, np = 1200;
  const double a = radii.x, b = radii.y, c = radii.z;
  double sum = 0.0;
  for (int i = 0; i < nt; ++i) {
    const double t = (i + 0.5) * kPi / nt;
    const double st = std::sin(t), ct = std::cos(t);
    for (int k = 0; k < np; ++k) {
      const double p = (k + 0.5) * 2.0 * kPi / np;
      const double sp = std::sin(p), cp = std::cos(p);
      const double nx = b * c * st * st * cp;
      const double ny = a * c * st * st * sp;
      const double nz = a * b * st * ct;
      sum += std::sqrt(nx * nx + ny * ny + nz * nz);
    }
  }
  return sum * (kPi / nt) * (2.0 * kPi / np);
}

double Ellipsoid::volume_above_x_mm3(double plane) const {
  const double a = radii.x;
  const double h = std::clamp(center.x + a - plane, 0.0, 2.0 * a);
  return kPi * radii.y * radii.z * h * h * (3.0 * a - h) / (3.0 * a * a);
}

bool Ellipsoid::contains(const Vec3& p) const {
  const double u = (p.x - center.x) / radii.x;
  const double v = (p.y - center.y) / radii.y;
  const double w = (p.z - center.z) / radii.z;
  return u * u + v * v + w * w <= 1.0;
}

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw ParameterError("phantom dims must be positive");
    if (!(spacing[a] > 0.0)) throw ParameterError("phantom spacing must be positive");
    if (dims[a] * spacing[a] < kLayoutExtentMm) {
      throw ParameterError("phantom field of view must cover 192 mm on every axis");
    }
  }
  if (noise_sigma < 0.0) throw ParameterError("noise_sigma must be >= 0");
  if (center_jitter_mm < 0.0 || center_jitter_mm > 3.0) {
    throw ParameterError("center_jitter_mm must lie in [0, 3]");
  }
  if (radius_jitter < 0.0 || radius_jitter > 0.08) {
    throw ParameterError("radius_jitter must lie in [0, 0.08]");
  }
  if (!(cortex_thickness_mm > 0.0) || cortex_thickness_mm > 10.0) {
    throw ParameterError("cortex_thickness_mm must lie in (0, 10]");
  }
}

nlohmann::json PhantomSpec::to_json() const {
  return {{"dims", {dims.nx, dims.ny, dims.nz}},
          {"spacing_mm", {spacing.dx, spacing.dy, spacing.dz}},
          {"noise_sigma", noise_sigma},
          {"center_jitter_mm", center_jitter_mm},
          {"radius_jitter", radius_jitter},
          {"cortex_thickness_mm", cortex_thickness_mm},
          {"intensity",
           {{"background", intensity.background},
            {"liver", intensity.liver},
            {"kidney", intensity.kidney},
            {"spleen", intensity.spleen},
            {"prostate", intensity.prostate}}}};
}

PhantomSpec PhantomSpec::from_json(const nlohmann::json& j) {
  PhantomSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "dims") s.dims = Dims(v.at(0).get<int>(), v.at(1).get<int>(), v.at(2).get<int>());
      else if (key == "spacing_mm") s.spacing = Spacing(v.at(0).get<double>(), v.at(1).get<double>(), v.at(2).get<double>());
      else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
      else if (key == "center_jitter_mm") s.center_jitter_mm = v.get<double>();
      else if (key == "radius_jitter") s.radius_jitter = v.get<double>();
      else if (key == "cortex_thickness_mm") s.cortex_thickness_mm = v.get<double>();
      else if (key == "intensity") {
        for (const auto& [k, iv] : v.items()) {
          if (k == "background") s.intensity.background = iv.get<double>();
          else if (k == "liver") s.intensity.liver = iv.get<double>();
          else if (k == "kidney") s.intensity.kidney = iv.get<double>();
          else if (k == "spleen") s.intensity.spleen = iv.get<double>();
          else if (k == "prostate") s.intensity.prostate = iv.get<double>();
          else throw ConfigError("unknown phantom intensity key '" + k + "'");
        }
      } else {
        throw ConfigError("unknown phantom key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed phantom config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  try {
    s.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  return s;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Rng shape_rng = rng.split("shapes");
  Rng noise_rng = rng.split("noise");

  Vec3 offset;
  for (int a = 0; a < 3; ++a) offset[a] = 0.5 * (spec.dims[a] * spec.spacing[a] - kLayoutExtentMm);

  const Ellipsoid liver_r = draw(kLiverRight, spec, offset, shape_rng);
  const Ellipsoid liver_l = draw(kLiverLeft, spec, offset, shape_rng);
  const Ellipsoid spleen = draw(kSpleen, spec, offset, shape_rng);
  const Ellipsoid kidney_r = draw(kRightKidney, spec, offset, shape_rng);
  const Ellipsoid kidney_l = draw(kLeftKidney, spec, offset, shape_rng);
  const Ellipsoid prostate = draw(kProstate, spec, offset, shape_rng);
  const double split = 0.5 * (liver_r.center.x + liver_l.center.x);
  const double t = spec.cortex_thickness_mm;
  const Ellipsoid medulla_r = shrink(kidney_r, t);
  const Ellipsoid medulla_l = shrink(kidney_l, t);

  GridGeometry g;
  g.dims = spec.dims;
  g.spacing = spec.spacing;
  g.origin = {0.5 * spec.spacing.dx, 0.5 * spec.spacing.dy, 0.5 * spec.spacing.dz};

  std::vector<std::uint8_t> labels(g.dims.count(), 0);
  std::vector<std::uint8_t> sub(g.dims.count(), 0);
  std::vector<float> image(g.dims.count());
  auto put = [&](std::size_t i, OrganId organ, Subregion code) {
    if (labels[i] != 0 && labels[i] != label_of(organ)) {
      throw ValidationError("phantom organs overlap");
    }
    labels[i] = label_of(organ);
    if (code != Subregion::None) sub[i] = static_cast<std::uint8_t>(code);
  };

  std::size_t i = 0;
  for (int z = 0; z < g.dims.nz; ++z) {
    for (int y = 0; y < g.dims.ny; ++y) {
      for (int x = 0; x < g.dims.nx; ++x, ++i) {
        const Vec3 p = g.world({x, y, z});
        if (p.x < split ? liver_r.contains(p) : liver_l.contains(p)) {
          put(i, OrganId::Liver, p.x < split ? Subregion::LiverRightLobe : Subregion::LiverLeftLobe);
        }
        if (spleen.contains(p)) put(i, OrganId::Spleen, Subregion::None);
        if (kidney_r.contains(p)) {
          put(i, OrganId::RightKidney,
              medulla_r.contains(p) ? Subregion::None : Subregion::RightKidneyCortex);
        }
        if (kidney_l.contains(p)) {
          put(i, OrganId::LeftKidney,
              medulla_l.contains(p) ? Subregion::None : Subregion::LeftKidneyCortex);
        }
        if (prostate.contains(p)) put(i, OrganId::Prostate, Subregion::None);
      }
    }
  }
  for (std::size_t k = 0; k < image.size(); ++k) {
    const double base = labels[k] == 0 ? spec.intensity.background
                                       : spec.intensity.of(organ_from_label(labels[k]));
    const double noise = spec.noise_sigma > 0.0 ? noise_rng.normal(0.0, spec.noise_sigma) : 0.0;
    image[k] = static_cast<float>(base + noise);
  }

  Phantom ph;
  ph.image = VoxelGrid(g, std::move(image));
  ph.truth.labels = LabelMask(g, std::move(labels));
  ph.truth.subregions = SubregionMask(g, std::move(sub));
  ph.truth.liver_split_x_mm = split;

  auto organ_truth = [&](OrganId organ, std::vector<Ellipsoid> shapes) {
    OrganTruth ot;
    ot.shapes = std::move(shapes);
    const auto box = bounding_box_of(ph.truth.labels, organ);
    if (!box) throw ParameterError("phantom organ falls between voxel centers");
    ot.box = *box;
    return ot;
  };

  {
    OrganTruth ot = organ_truth(OrganId::Liver, {liver_r, liver_l});
    const double left = liver_l.volume_above_x_mm3(split);
    const double right = liver_r.volume_mm3() - liver_r.volume_above_x_mm3(split);
    ot.values.set(Quantity::VolumeCc, (left + right) / 1000.0);
    ot.values.set(Quantity::RightLobeCc, right / 1000.0);
    ot.values.set(Quantity::LeftLobeCc, left / 1000.0);
    ph.truth.organs[OrganId::Liver] = ot;
  }
  for (const auto& [organ, e] : {std::pair{OrganId::RightKidney, kidney_r},
                                 std::pair{OrganId::LeftKidney, kidney_l}}) {
    OrganTruth ot = organ_truth(organ, {e});
    ot.values.set(Quantity::VolumeCc, e.volume_mm3() / 1000.0);
    ot.values.set(Quantity::LengthMm, 2.0 * std::max({e.radii.x, e.radii.y, e.radii.z}));
    ot.values.set(Quantity::CorticalThicknessMm, t);
    ph.truth.organs[organ] = ot;
  }
  {
    OrganTruth ot = organ_truth(OrganId::Spleen, {spleen});
    ot.values.set(Quantity::VolumeCc, spleen.volume_mm3() / 1000.0);
    ot.values.set(Quantity::SurfaceAreaCm2, spleen.surface_area_mm2() / 100.0);
    ph.truth.organs[OrganId::Spleen] = ot;
  }
  {
    OrganTruth ot = organ_truth(OrganId::Prostate, {prostate});
    ot.values.set(Quantity::VolumeCc, prostate.volume_mm3() / 1000.0);
    ot.values.set(Quantity::ApDiameterMm, 2.0 * prostate.radii.y);
    ph.truth.organs[OrganId::Prostate] = ot;
  }
  return ph;
}

nlohmann::json PhantomTruth::to_json() const {
  nlohmann::json organs_json = nlohmann::json::object();
  for (const auto& [organ, ot] : organs) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& e : ot.shapes) {
      shapes.push_back({{"center_mm", vec_json(e.center)}, {"radii_mm", vec_json(e.radii)}});
    }
    organs_json[std::string(organ_name(organ))] = {
        {"values", ot.values.to_json(organ)},
        {"box", {{"lo", {ot.box.lo().x, ot.box.lo().y, ot.box.lo().z}},
                 {"hi", {ot.box.hi().x, ot.box.hi().y, ot.box.hi().z}}}},
        {"ellipsoids", shapes}};
  }
  return {{"organs", organs_json}, {"liver_split_x_mm", liver_split_x_mm}};
}

std::map<OrganId, OrganTruth> read_truth(const std::filesystem::path& path) {
  const nlohmann::json j = io::read_json_file(path);
  std::map<OrganId, OrganTruth> out;
  try {
    for (const auto& [name, o] : j.at("organs").items()) {
      OrganTruth ot;
      ot.values = Measurements::from_json(o.at("values"));
      const auto& lo = o.at("box").at("lo");
      const auto& hi = o.at("box").at("hi");
      ot.box = Box3D({lo.at(0).get<int>(), lo.at(1).get<int>(), lo.at(2).get<int>()},
                     {hi.at(0).get<int>(), hi.at(1).get<int>(), hi.at(2).get<int>()});
      for (const auto& e : o.at("ellipsoids")) {
        ot.shapes.push_back({vec_from(e.at("center_mm")), vec_from(e.at("radii_mm"))});
      }
      out[organ_from_name(name)] = ot;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed truth file: " + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

std::string case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%03d", index);
  return buf;
}

std::vector<DatasetEntry> generate_dataset(int count, std::uint64_t base_seed,
                                           const PhantomSpec& spec,
                                           const std::filesystem::path& dir, int threads) {
  if (count < 1) throw ParameterError("dataset count must be >= 1");
  spec.validate();
  std::filesystem::create_directories(dir);
  std::vector<DatasetEntry> entries(count);
  std::vector<nlohmann::json> summaries(count);
  for (int k = 0; k < count; ++k) {
    DatasetEntry& e = entries[k];
    e.id = case_id(k);
    e.seed = base_seed + static_cast<std::uint64_t>(k);
    e.image_stem = e.id + "_image";
    e.labels_stem = e.id + "_labels";
    e.subregions_stem = e.id + "_subregions";
    e.truth_path = e.id + "_truth.json";
  }

  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(count);
  auto worker = [&] {
    for (int k; (k = next.fetch_add(1)) < count;) {
      try {
        PhantomSpec s = spec;
        s.seed = entries[k].seed;
        const Phantom ph = generate_phantom(s);
        io::write_volume(ph.image, dir / entries[k].image_stem);
        io::write_volume(ph.truth.labels, dir / entries[k].labels_stem);
        io::write_volume(ph.truth.subregions, dir / entries[k].subregions_stem);
        const nlohmann::json tj = ph.truth.to_json();
        io::write_json_file(dir / entries[k].truth_path, tj);
        summaries[k] = tj;
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min(threads, count));
  std::vector<std::thread> pool;
  for (int w = 1; w < n; ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  nlohmann::json cases = nlohmann::json::array();
  for (int k = 0; k < count; ++k) {
    const DatasetEntry& e = entries[k];
    nlohmann::json values = nlohmann::json::object();
    for (const auto& [name, o] : summaries[k]["organs"].items()) values[name] = o["values"];
    cases.push_back({{"id", e.id},
                     {"seed", e.seed},
                     {"image", e.image_stem.string()},
                     {"labels", e.labels_stem.string()},
                     {"subregions", e.subregions_stem.string()},
                     {"truth", e.truth_path.string()},
                     {"values", values}});
  }
  io::write_json_file(dir / "manifest.json", {{"format", "ctm-phantom-manifest"},
                                              {"version", 1},
                                              {"base_seed", base_seed},
                                              {"spec", spec.to_json()},
                                              {"cases", cases}});
  return entries;
}

}  // namespace ctm::phantom
