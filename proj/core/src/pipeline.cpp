#include "ctm/pipeline.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <fstream>
#include <sstream>

#include "ctm/error.hpp"
#include "ctm/eval.hpp"
#include "ctm/geometry.hpp"
#include "ctm/io.hpp"
#include "ctm/postproc.hpp"
#include "ctm/preprocess.hpp"

namespace ctm::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- digests

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
      throw StateError("cannot initialise SHA-256");
    }
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  void update(std::string_view s) { update(s.data(), s.size()); }

  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
      out += kHex[md[i] >> 4];
      out += kHex[md[i] & 15];
    }
    return out;
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

// ---------------------------------------------------------------- config

EvalSection::EvalSection() {
  for (int i = 0; i < kNumQuantities; ++i) scales[i] = normalization_scale(static_cast<Quantity>(i));
}

void PipelineConfig::validate() const {
  if (phantom.train_count < 1 || phantom.test_count < 1) {
    throw ConfigError("phantom train_count and test_count must be >= 1");
  }
  try {
    phantom.spec.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (!(target_mm > 0.0)) throw ConfigError("preprocess target_mm must be positive");
  segnet.validate();
  segnet_training.validate();
  if (postproc.min_voxels < 0) throw ConfigError("postproc min_voxels must be >= 0");
  if (postproc.connectivity != 6 && postproc.connectivity != 26) {
    throw ConfigError("postproc connectivity must be 6 or 26");
  }
  measure.validate();
  measure_training.validate();
  for (double s : eval.scales) {
    if (!(s > 0.0)) throw ConfigError("eval scales must be positive");
  }
  if (eval.roc_points < 2) throw ConfigError("eval roc_points must be >= 2");
}

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json ph = phantom.spec.to_json();
  ph["train_count"] = phantom.train_count;
  ph["test_count"] = phantom.test_count;
  nlohmann::json scales = nlohmann::json::object();
  for (int i = 0; i < kNumQuantities; ++i) {
    scales[std::string(quantity_name(static_cast<Quantity>(i)))] = eval.scales[i];
  }
  return {{"seed", seed},
          {"phantom", ph},
          {"preprocess", {{"target_mm", target_mm}}},
          {"segnet", segnet.to_json()},
          {"segnet_training", segnet_training.to_json()},
          {"postproc", {{"min_voxels", postproc.min_voxels}, {"connectivity", postproc.connectivity}}},
          {"measure", measure.to_json()},
          {"measure_training", measure_training.to_json()},
          {"eval", {{"scales", scales}, {"roc_points", eval.roc_points}}}};
}

namespace {

Quantity quantity_from_name(const std::string& name) {
  for (int i = 0; i < kNumQuantities; ++i) {
    if (quantity_name(static_cast<Quantity>(i)) == name) return static_cast<Quantity>(i);
  }
  throw ConfigError("unknown quantity '" + name + "'");
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  PipelineConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "output") {
        c.output = v.get<std::string>();
      } else if (key == "phantom") {
        nlohmann::json spec = nlohmann::json::object();
        for (const auto& [pk, pv] : v.items()) {
          if (pk == "train_count") c.phantom.train_count = pv.get<int>();
          else if (pk == "test_count") c.phantom.test_count = pv.get<int>();
          else spec[pk] = pv;
        }
        c.phantom.spec = phantom::PhantomSpec::from_json(spec);
      } else if (key == "preprocess") {
        for (const auto& [pk, pv] : v.items()) {
          if (pk == "target_mm") c.target_mm = pv.get<double>();
          else throw ConfigError("unknown preprocess key '" + pk + "'");
        }
      } else if (key == "segnet") {
        c.segnet = seg::SegNetConfig::from_json(v);
      } else if (key == "segnet_training") {
        c.segnet_training = seg::SegTrainConfig::from_json(v);
      } else if (key == "postproc") {
        for (const auto& [pk, pv] : v.items()) {
          if (pk == "min_voxels") c.postproc.min_voxels = pv.get<int>();
          else if (pk == "connectivity") c.postproc.connectivity = pv.get<int>();
          else throw ConfigError("unknown postproc key '" + pk + "'");
        }
      } else if (key == "measure") {
        c.measure = rpn::MeasureNetConfig::from_json(v);
      } else if (key == "measure_training") {
        c.measure_training = rpn::MeasureTrainConfig::from_json(v);
      } else if (key == "eval") {
        for (const auto& [ek, ev] : v.items()) {
          if (ek == "roc_points") {
            c.eval.roc_points = ev.get<int>();
          } else if (ek == "scales") {
            for (const auto& [q, s] : ev.items()) {
              c.eval.scales[static_cast<int>(quantity_from_name(q))] = s.get<double>();
            }
          } else {
            throw ConfigError("unknown eval key '" + ek + "'");
          }
        }
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::string PipelineConfig::digest() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------- stage plumbing

namespace {

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stream) {
  return Rng(seed).split(stream).next_u64();
}

std::vector<fs::path> volume_files(const fs::path& stem) {
  return {io::header_path(stem), io::payload_path(stem)};
}

void append(std::vector<fs::path>& to, const std::vector<fs::path>& from) {
  to.insert(to.end(), from.begin(), from.end());
}

struct StageSpec {
  nlohmann::json settings;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::function<void()> run;
};

std::string rel_name(const fs::path& p, const fs::path& root) {
  return p.lexically_relative(root).generic_string();
}

std::string input_digest(std::string_view stage, const StageSpec& s, const fs::path& root) {
  Sha256 h;
  h.update(stage);
  h.update("\n");
  h.update(s.settings.dump());
  for (const auto& p : s.inputs) {
    if (!fs::exists(p)) throw IoError("missing input file: " + p.string());
    h.update("\n" + rel_name(p, root) + " " + sha256_file(p));
  }
  return h.hex();
}

bool stamp_matches(const fs::path& stamp, const std::string& digest, const StageSpec& s,
                   const fs::path& root) {
  if (!fs::exists(stamp)) return false;
  nlohmann::json j;
  try {
    j = io::read_json_file(stamp);
  } catch (const Error&) {
    return false;
  }
  if (!j.is_object() || j.value("input_digest", std::string()) != digest || !j.contains("outputs"))
    return false;
  const auto& outs = j.at("outputs");
  if (outs.size() != s.outputs.size()) return false;
  for (const auto& p : s.outputs) {
    const auto it = outs.find(rel_name(p, root));
    if (it == outs.end() || !fs::exists(p) || *it != sha256_file(p)) return false;
  }
  return true;
}

void write_stamp(const fs::path& stamp, std::string_view stage, const std::string& digest,
                 const StageSpec& s, const fs::path& root, double seconds) {
  nlohmann::json outs = nlohmann::json::object();
  for (const auto& p : s.outputs) {
    if (!fs::exists(p)) throw StateError("stage " + std::string(stage) + " did not write " + p.string());
    outs[rel_name(p, root)] = sha256_file(p);
  }
  io::write_json_file(stamp, {{"stage", stage}, {"input_digest", digest}, {"outputs", outs},
                              {"seconds", seconds}});
}

std::vector<std::string> case_ids(int count) {
  std::vector<std::string> ids;
  for (int i = 0; i < count; ++i) ids.push_back(phantom::case_id(i));
  return ids;
}

OrganId organ_of_subregion(std::uint8_t code) {
  switch (static_cast<Subregion>(code)) {
    case Subregion::LiverRightLobe:
    case Subregion::LiverLeftLobe: return OrganId::Liver;
    case Subregion::RightKidneyCortex: return OrganId::RightKidney;
    case Subregion::LeftKidneyCortex: return OrganId::LeftKidney;
    default: break;
  }
  throw FormatError("unexpected subregion code " + std::to_string(code));
}

/// Annotated subregions restricted to voxels the segmentation assigns to the owning organ.
SubregionMask restrict_subregions(const SubregionMask& annotated, const LabelMask& predicted) {
  if (annotated.geometry() != predicted.geometry()) {
    throw ShapeError("subregion annotation and prediction geometry differ");
  }
  std::vector<std::uint8_t> out(annotated.values().size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t c = annotated.values()[i];
    if (c != 0 && predicted.values()[i] == label_of(organ_of_subregion(c))) out[i] = c;
  }
  return SubregionMask(annotated.geometry(), std::move(out));
}

nlohmann::json box_json(const rpn::BoxF& b) { return {{"lo", b.lo}, {"hi", b.hi}}; }

rpn::BoxF box_from(const nlohmann::json& j) {
  rpn::BoxF b;
  b.lo = j.at("lo").get<std::array<double, 3>>();
  b.hi = j.at("hi").get<std::array<double, 3>>();
  return b;
}

class Stages {
 public:
  Stages(const PipelineConfig& cfg, const RunOptions& opts) : cfg_(cfg), opts_(opts), L_{cfg.output} {}

  StageSpec spec(std::string_view stage) const {
    if (stage == "gen-phantoms") return gen_phantoms();
    if (stage == "preprocess") return preprocess();
    if (stage == "train-seg") return train_seg();
    if (stage == "segment") return segment();
    if (stage == "postprocess") return postprocess();
    if (stage == "train-measure") return train_measure();
    if (stage == "measure") return measure();
    if (stage == "evaluate") return evaluate();
    throw ConfigError("unknown stage '" + std::string(stage) + "'");
  }

 private:
  void log(const std::string& line) const {
    if (opts_.log) opts_.log(line);
  }
  void progress(nlohmann::json j) const {
    if (opts_.progress) opts_.progress(j);
  }
  int count(std::string_view split) const {
    return split == "train" ? cfg_.phantom.train_count : cfg_.phantom.test_count;
  }
  fs::path phantom_stem(std::string_view split, const std::string& id, const char* part) const {
    return L_.phantoms(split) / (id + "_" + part);
  }
  fs::path prep_stem(std::string_view split, const std::string& id, const char* part) const {
    return L_.preprocessed(split) / (id + "_" + part);
  }
  fs::path truth_path(std::string_view split, const std::string& id) const {
    return L_.phantoms(split) / (id + "_truth.json");
  }
  fs::path pred_stem(const std::string& id, const std::string& part) const {
    return L_.predictions() / (id + "_" + part);
  }
  fs::path seg_ckpt() const { return L_.checkpoints() / "segnet"; }
  fs::path measure_ckpt() const { return L_.checkpoints() / "measure"; }

  StageSpec gen_phantoms() const {
    StageSpec s;
    s.settings = {{"seed", cfg_.seed}, {"phantom", cfg_.to_json()["phantom"]}};
    for (const char* split : {"train", "test"}) {
      s.outputs.push_back(L_.phantoms(split) / "manifest.json");
      for (const auto& id : case_ids(count(split))) {
        for (const char* part : {"image", "labels", "subregions"}) {
          append(s.outputs, volume_files(phantom_stem(split, id, part)));
        }
        s.outputs.push_back(truth_path(split, id));
      }
    }
    s.run = [this] {
      for (const char* split : {"train", "test"}) {
        const auto base = stage_seed(cfg_.seed, std::string("phantoms.") + split);
        phantom::generate_dataset(count(split), base, cfg_.phantom.spec, L_.phantoms(split), opts_.threads);
        log("generated " + std::to_string(count(split)) + " " + split + " phantoms");
      }
    };
    return s;
  }

  StageSpec preprocess() const {
    StageSpec s;
    s.settings = {{"target_mm", cfg_.target_mm}};
    for (const char* split : {"train", "test"}) {
      for (const auto& id : case_ids(count(split))) {
        for (const char* part : {"image", "labels", "subregions"}) {
          append(s.inputs, volume_files(phantom_stem(split, id, part)));
          append(s.outputs, volume_files(prep_stem(split, id, part)));
        }
      }
    }
    s.run = [this] {
      for (const char* split : {"train", "test"}) {
        fs::create_directories(L_.preprocessed(split));
        for (const auto& id : case_ids(count(split))) {
          const auto img = prep::zscore_normalize(
              prep::resample_isotropic(io::read_grid(phantom_stem(split, id, "image")), cfg_.target_mm));
          io::write_volume(img, prep_stem(split, id, "image"));
          io::write_volume(prep::resample_mask(io::read_label_mask(phantom_stem(split, id, "labels")), cfg_.target_mm),
                           prep_stem(split, id, "labels"));
          io::write_volume(
              prep::resample_mask(io::read_subregion_mask(phantom_stem(split, id, "subregions")), cfg_.target_mm),
              prep_stem(split, id, "subregions"));
        }
      }
    };
    return s;
  }

  StageSpec train_seg() const {
    StageSpec s;
    s.settings = {{"seed", cfg_.seed},
                  {"segnet", cfg_.segnet.to_json()},
                  {"segnet_training", cfg_.segnet_training.to_json()}};
    for (const auto& id : case_ids(count("train"))) {
      append(s.inputs, volume_files(prep_stem("train", id, "image")));
      append(s.inputs, volume_files(prep_stem("train", id, "labels")));
    }
    append(s.outputs, volume_files(seg_ckpt()));
    s.outputs.push_back(L_.checkpoints() / "segnet_log.csv");
    s.run = [this] {
      std::vector<seg::SegSample> data;
      for (const auto& id : case_ids(count("train"))) {
        data.push_back({id, io::read_grid(prep_stem("train", id, "image")),
                        io::read_label_mask(prep_stem("train", id, "labels"))});
      }
      seg::SegTrainHooks hooks;
      hooks.on_epoch = [this](const seg::SegLogRow& r) {
        progress({{"stage", "train-seg"}, {"event", "epoch"}, {"epoch", r.epoch}, {"step", r.step},
                  {"lr", r.lr}, {"loss", r.loss}, {"val_dice", r.val_dice}});
      };
      auto result = seg::train_segmentation(data, cfg_.segnet, cfg_.segnet_training,
                                            stage_seed(cfg_.seed, "train-seg"), opts_.threads, hooks);
      fs::create_directories(L_.checkpoints());
      seg::save_segmentation(seg_ckpt(), result.net, result.best_epoch,
                             cfg_.segnet_training.effective_schedule());
      io::write_text_file(L_.checkpoints() / "segnet_log.csv", seg::log_csv(result.log));
      log("segmentation: best epoch " + std::to_string(result.best_epoch) + ", validation dice " +
          std::to_string(result.best_val_dice));
    };
    return s;
  }

  StageSpec segment() const {
    StageSpec s;
    s.settings = {{"infer_patch", cfg_.segnet_training.to_json()["infer_patch"]},
                  {"infer_stride", cfg_.segnet_training.to_json()["infer_stride"]}};
    append(s.inputs, volume_files(seg_ckpt()));
    for (const auto& id : case_ids(count("test"))) {
      append(s.inputs, volume_files(prep_stem("test", id, "image")));
      append(s.outputs, volume_files(pred_stem(id, "seg")));
      for (OrganId organ : kAllOrgans) {
        append(s.outputs, volume_files(pred_stem(id, "prob_" + std::string(organ_name(organ)))));
      }
    }
    s.run = [this] {
      const auto net = seg::load_segmentation(seg_ckpt(), cfg_.segnet);
      fs::create_directories(L_.predictions());
      for (const auto& id : case_ids(count("test"))) {
        const auto pred = seg::predict_segmentation(io::read_grid(prep_stem("test", id, "image")), net,
                                                    cfg_.segnet_training.infer_patch, opts_.threads);
        io::write_volume(pred.labels, pred_stem(id, "seg"));
        for (OrganId organ : kAllOrgans) {
          io::write_volume(pred.probabilities[label_of(organ)],
                           pred_stem(id, "prob_" + std::string(organ_name(organ))));
        }
        progress({{"stage", "segment"}, {"event", "case"}, {"id", id}});
      }
    };
    return s;
  }

  StageSpec postprocess() const {
    StageSpec s;
    s.settings = {{"min_voxels", cfg_.postproc.min_voxels}, {"connectivity", cfg_.postproc.connectivity}};
    for (const auto& id : case_ids(count("test"))) {
      append(s.inputs, volume_files(pred_stem(id, "seg")));
      append(s.outputs, volume_files(pred_stem(id, "post")));
    }
    s.run = [this] {
      for (const auto& id : case_ids(count("test"))) {
        io::write_volume(post::remove_small_components(io::read_label_mask(pred_stem(id, "seg")),
                                                       cfg_.postproc.min_voxels, cfg_.postproc.connectivity),
                         pred_stem(id, "post"));
      }
    };
    return s;
  }

  StageSpec train_measure() const {
    StageSpec s;
    s.settings = {{"seed", cfg_.seed},
                  {"measure", cfg_.measure.to_json()},
                  {"measure_training", cfg_.measure_training.to_json()}};
    for (const auto& id : case_ids(count("train"))) {
      append(s.inputs, volume_files(prep_stem("train", id, "image")));
      append(s.inputs, volume_files(prep_stem("train", id, "labels")));
      s.inputs.push_back(truth_path("train", id));
    }
    append(s.outputs, volume_files(measure_ckpt()));
    s.outputs.push_back(L_.checkpoints() / "measure_log.csv");
    s.run = [this] {
      std::vector<rpn::MeasureSample> data;
      for (const auto& id : case_ids(count("train"))) {
        std::map<OrganId, Measurements> truth;
        for (const auto& [organ, t] : phantom::read_truth(truth_path("train", id))) truth[organ] = t.values;
        data.push_back({id, io::read_grid(prep_stem("train", id, "image")),
                        io::read_label_mask(prep_stem("train", id, "labels")), std::move(truth)});
      }
      auto result = rpn::train_measurement(
          data, cfg_.measure, cfg_.measure_training, stage_seed(cfg_.seed, "train-measure"),
          [this](const rpn::MeasureLogRow& r) {
            progress({{"stage", "train-measure"}, {"event", "epoch"}, {"epoch", r.epoch}, {"step", r.step},
                      {"lr_backbone", r.lr_backbone}, {"rpn_loss", r.rpn_loss},
                      {"measure_loss", r.measure_loss}});
          });
      fs::create_directories(L_.checkpoints());
      rpn::save_measurement(measure_ckpt(), result.net, cfg_.measure_training.epochs - 1, cfg_.measure_training);
      io::write_text_file(L_.checkpoints() / "measure_log.csv", rpn::measure_log_csv(result.log));
      log("measurement network trained for " + std::to_string(cfg_.measure_training.epochs) + " epochs");
    };
    return s;
  }

  StageSpec measure() const {
    StageSpec s;
    s.settings = nlohmann::json::object();
    append(s.inputs, volume_files(measure_ckpt()));
    for (const auto& id : case_ids(count("test"))) {
      append(s.inputs, volume_files(prep_stem("test", id, "image")));
      append(s.inputs, volume_files(prep_stem("test", id, "subregions")));
      append(s.inputs, volume_files(pred_stem(id, "post")));
      s.outputs.push_back(L_.predictions() / (id + "_measure.json"));
    }
    s.run = [this] {
      const auto net = rpn::load_measurement(measure_ckpt(), cfg_.measure);
      for (const auto& id : case_ids(count("test"))) {
        const auto image = io::read_grid(prep_stem("test", id, "image"));
        const auto labels = io::read_label_mask(pred_stem(id, "post"));
        const auto sub = restrict_subregions(io::read_subregion_mask(prep_stem("test", id, "subregions")), labels);
        const auto learned = rpn::run_measurement(image, net, opts_.threads);
        nlohmann::json organs = nlohmann::json::object();
        for (OrganId organ : kReportOrder) {
          nlohmann::json o;
          o["geometric"] = geo::measure_organ(labels, &sub, organ).to_json(organ);
          const auto it = learned.detections.find(organ);
          if (it == learned.detections.end()) {
            o["learned"] = nullptr;
            o["detection"] = nullptr;
          } else {
            const auto& d = it->second;
            o["learned"] = d.values.to_json(organ);
            o["detection"] = {{"box", box_json(d.box)}, {"objectness", d.objectness},
                              {"class_prob", d.class_prob}};
          }
          organs[std::string(organ_name(organ))] = o;
        }
        io::write_json_file(L_.predictions() / (id + "_measure.json"), {{"id", id}, {"organs", organs}});
        progress({{"stage", "measure"}, {"event", "case"}, {"id", id}});
      }
    };
    return s;
  }

  StageSpec evaluate() const {
    StageSpec s;
    s.settings = {{"digest", cfg_.digest()}, {"seed", cfg_.seed}, {"eval", cfg_.to_json()["eval"]}};
    for (const auto& id : case_ids(count("test"))) {
      append(s.inputs, volume_files(pred_stem(id, "post")));
      for (OrganId organ : kAllOrgans) {
        append(s.inputs, volume_files(pred_stem(id, "prob_" + std::string(organ_name(organ)))));
      }
      s.inputs.push_back(L_.predictions() / (id + "_measure.json"));
      append(s.inputs, volume_files(prep_stem("test", id, "labels")));
      s.inputs.push_back(truth_path("test", id));
    }
    s.outputs = {L_.report(), L_.roc()};
    s.run = [this] { io_evaluate(); };
    return s;
  }

  void io_evaluate() const {
    struct Accum {
      eval::Confusion conf{};
      std::vector<float> scores;
      std::vector<std::uint8_t> positive;
      std::vector<double> pred, truth, scales, ones;
      std::vector<double> ious, learned_rel, geo_rel;
      std::vector<eval::CaseMeasurement> cases;
    };
    std::map<OrganId, Accum> acc;
    for (const auto& id : case_ids(count("test"))) {
      const auto post = io::read_label_mask(pred_stem(id, "post"));
      const auto truth_labels = io::read_label_mask(prep_stem("test", id, "labels"));
      const auto truth = phantom::read_truth(truth_path("test", id));
      const auto mj = io::read_json_file(L_.predictions() / (id + "_measure.json"));
      for (OrganId organ : kReportOrder) {
        Accum& a = acc[organ];
        const auto c = eval::confusion(post, truth_labels, organ);
        a.conf.tp += c.tp;
        a.conf.fp += c.fp;
        a.conf.fn += c.fn;
        const auto prob = io::read_grid(pred_stem(id, "prob_" + std::string(organ_name(organ))));
        if (prob.geometry() != truth_labels.geometry()) throw ShapeError("probability map geometry differs for " + id);
        a.scores.insert(a.scores.end(), prob.values().begin(), prob.values().end());
        for (auto l : truth_labels.values()) a.positive.push_back(l == label_of(organ));

        const auto& oj = mj.at("organs").at(std::string(organ_name(organ)));
        eval::CaseMeasurement cm;
        cm.id = id;
        cm.geometric.values = Measurements::from_json(oj.at("geometric"));
        if (const auto& z = oj.at("geometric").at("z_extent_mm"); !z.is_null()) cm.geometric.z_extent_mm = z.get<double>();
        const auto tit = truth.find(organ);
        if (tit != truth.end()) cm.truth = tit->second.values;
        const auto true_box = bounding_box_of(truth_labels, organ);
        if (!oj.at("learned").is_null()) {
          cm.learned = Measurements::from_json(oj.at("learned"));
          if (true_box) cm.best_iou = rpn::iou(box_from(oj.at("detection").at("box")), rpn::BoxF::from(*true_box));
        } else if (true_box) {
          cm.best_iou = 0.0;  // missed organ
        }
        if (cm.best_iou) a.ious.push_back(*cm.best_iou);
        if (cm.truth) {
          const auto tv = cm.truth->get(Quantity::VolumeCc);
          for (Quantity q : quantities_for(organ)) {
            const auto t = cm.truth->get(q);
            const auto p = cm.learned ? cm.learned->get(q) : std::nullopt;
            if (!t || !p) continue;
            a.pred.push_back(*p);
            a.truth.push_back(*t);
            a.scales.push_back(cfg_.eval.scales[static_cast<int>(q)]);
            a.ones.push_back(1.0);
          }
          if (tv && *tv > 0.0) {
            if (cm.learned && cm.learned->get(Quantity::VolumeCc)) {
              a.learned_rel.push_back(std::abs(*cm.learned->get(Quantity::VolumeCc) - *tv) / *tv);
            }
            if (const auto g = cm.geometric.values.get(Quantity::VolumeCc)) {
              a.geo_rel.push_back(std::abs(*g - *tv) / *tv);
            }
          }
        }
        a.cases.push_back(std::move(cm));
      }
    }
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
      if (v.empty()) return std::nullopt;
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    eval::MeasurementReport report;
    report.config_digest = cfg_.digest();
    report.seed = cfg_.seed;
    for (OrganId organ : kReportOrder) {
      Accum& a = acc[organ];
      eval::OrganReport r;
      r.organ = organ;
      r.metrics.precision = a.conf.precision();
      r.metrics.recall = a.conf.recall();
      r.metrics.dice = a.conf.dice();
      const auto roc = eval::roc_auc(a.scores, a.positive, static_cast<std::size_t>(cfg_.eval.roc_points));
      r.metrics.auc = roc.auc;
      r.roc = roc.points;
      r.metrics.mse = eval::measurement_mse(a.pred, a.truth, a.scales);
      r.metrics.mse_raw = eval::measurement_mse(a.pred, a.truth, a.ones);
      r.metrics.mean_iou = mean(a.ious);
      r.metrics.learned_volume_rel_error = mean(a.learned_rel);
      r.metrics.geometric_volume_rel_error = mean(a.geo_rel);
      r.cases = std::move(a.cases);
      report.organs.push_back(std::move(r));
    }
    eval::emit_report(report, L_.root);
  }

  const PipelineConfig& cfg_;
  const RunOptions& opts_;
  Layout L_;
};

}  // namespace

StageStatus run_stage(std::string_view stage, const PipelineConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Layout L{cfg.output};
  Stages stages(cfg, opts);
  StageSpec s = stages.spec(stage);
  const auto t0 = std::chrono::steady_clock::now();
  if (opts.progress) opts.progress({{"stage", stage}, {"event", "start"}});
  const std::string digest = input_digest(stage, s, L.root);
  const fs::path stamp = L.stamps() / (std::string(stage) + ".json");
  if (stamp_matches(stamp, digest, s, L.root)) {
    if (opts.log) opts.log(std::string(stage) + ": up to date");
    if (opts.progress) opts.progress({{"stage", stage}, {"event", "skip"}});
    return StageStatus::Skipped;
  }
  fs::create_directories(L.stamps());
  std::error_code ec;
  fs::remove(stamp, ec);
  s.run();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_stamp(stamp, stage, digest, s, L.root, secs);
  io::write_json_file(L.root / "config.json", {{"digest", cfg.digest()}, {"config", cfg.to_json()}});
  if (opts.log) {
    std::ostringstream os;
    os << stage << ": done in " << secs << " s";
    opts.log(os.str());
  }
  if (opts.progress) opts.progress({{"stage", stage}, {"event", "done"}, {"seconds", secs}});
  return StageStatus::Ran;
}

void run_all(const PipelineConfig& cfg, const RunOptions& opts) {
  for (std::string_view stage : kStages) run_stage(stage, cfg, opts);
}

}  // namespace ctm::pipeline
