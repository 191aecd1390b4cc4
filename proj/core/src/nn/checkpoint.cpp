#include "ctm/nn/checkpoint.hpp"

#include "ctm/io.hpp"

namespace ctm::nn {

namespace {

constexpr const char* kFormat = "ctm-checkpoint";
constexpr int kVersion = 1;

nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.x, s.y, s.z}; }


}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& stem, const ParamSet<T>& set,
                     const CheckpointMeta& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  auto put = [&](const std::string& name, const char* kind, const Tensor<T>& t) {
    tensors.push_back({{"name", name}, {"shape", shape_json(t.shape())}, {"kind", kind}});
    for (std::size_t i = 0; i < t.size(); ++i) io::append_f32le(payload, static_cast<float>(t[i]));
  };
  for (const auto& p : set.params) put(p.name, "param", p.param->value());
  for (const auto& b : set.buffers) put(b.name, "buffer", *b.buffer);
  nlohmann::json header = {{"format", kFormat},       {"version", kVersion},
                           {"model", meta.model},     {"epoch", meta.epoch},
                           {"schedule", meta.schedule}, {"config", meta.config},
                           {"tensors", tensors}};
  io::write_binary_file(io::payload_path(stem), payload);
  io::write_json_file(io::header_path(stem), header);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& stem) {
  const nlohmann::json h = io::read_json_file(io::header_path(stem));
  try {
    if (h.at("format").get<std::string>() != kFormat) {
      throw FormatError("not a checkpoint: " + io::header_path(stem).string());
    }
    if (h.at("version").get<int>() != kVersion) {
      throw FormatError("unsupported checkpoint version");
    }
    CheckpointMeta m;
    m.model = h.at("model").get<std::string>();
    m.epoch = h.at("epoch").get<int>();
    m.schedule = h.at("schedule");
    m.config = h.at("config");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
}

template <class T>
CheckpointMeta load_checkpoint(const std::filesystem::path& stem, ParamSet<T>& set,
                               const std::string& expected_model) {
  CheckpointMeta meta = read_checkpoint_meta(stem);
  if (meta.model != expected_model) {
    throw FormatError("checkpoint holds model '" + meta.model + "', expected '" + expected_model +
                      "'");
  }
  const nlohmann::json h = io::read_json_file(io::header_path(stem));
  const auto& tensors = h.at("tensors");
  std::vector<std::pair<std::string, Tensor<T>*>> targets;
  std::vector<std::string> kinds;
  for (auto& p : set.params) {
    targets.emplace_back(p.name, &p.param->value());
    kinds.emplace_back("param");
  }
  for (auto& b : set.buffers) {
    targets.emplace_back(b.name, b.buffer);
    kinds.emplace_back("buffer");
  }
  if (tensors.size() != targets.size()) {
    throw FormatError("checkpoint has " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(targets.size()));
  }
  std::size_t total = 0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const auto& t = tensors[k];
    const Shape& want = targets[k].second->shape();
    if (t.value("name", "") != targets[k].first || t.value("kind", "") != kinds[k] ||
        t.at("shape") != shape_json(want)) {
      throw FormatError("checkpoint tensor " + std::to_string(k) + " ('" + t.value("name", "") +
                        "') does not match model tensor '" + targets[k].first + "' " + want.str());
    }
    total += want.count();
  }
  const auto payload = io::read_binary_file(io::payload_path(stem));
  if (payload.size() != total * 4) {
    throw FormatError("checkpoint payload is " + std::to_string(payload.size()) + " bytes, expected " +
                      std::to_string(total * 4));
  }
  const std::uint8_t* p = payload.data();
  for (auto& [name, tensor] : targets) {
    for (std::size_t i = 0; i < tensor->size(); ++i, p += 4) {
      (*tensor)[i] = static_cast<T>(io::load_f32le(p));
    }
  }
  return meta;
}

template void save_checkpoint<float>(const std::filesystem::path&, const ParamSet<float>&,
                                     const CheckpointMeta&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamSet<double>&,
                                      const CheckpointMeta&);
template CheckpointMeta load_checkpoint<float>(const std::filesystem::path&, ParamSet<float>&,
                                               const std::string&);
template CheckpointMeta load_checkpoint<double>(const std::filesystem::path&, ParamSet<double>&,
                                                const std::string&);

}  // namespace ctm::nn
