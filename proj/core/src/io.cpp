#include "ctm/io.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ctm::io {
namespace fs = std::filesystem;

std::size_t VolumeHeader::voxel_count() const {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
         static_cast<std::size_t>(dims[2]);
}

std::size_t VolumeHeader::payload_bytes() const {
  return voxel_count() * (dtype == "f32le" ? 4u : 1u);
}

GridGeometry VolumeHeader::geometry() const {
  GridGeometry g;
  g.dims = Dims(dims[0], dims[1], dims[2]);
  g.spacing = Spacing(spacing_mm[0], spacing_mm[1], spacing_mm[2]);
  g.origin = {origin_mm[0], origin_mm[1], origin_mm[2]};
  return g;
}

nlohmann::json VolumeHeader::to_json() const {
  nlohmann::json j;
  j["dims"] = dims;
  j["spacing_mm"] = spacing_mm;
  j["origin_mm"] = origin_mm;
  j["dtype"] = dtype;
  j["order"] = order;
  j["kind"] = kind;
  return j;
}

VolumeHeader VolumeHeader::from_json(const nlohmann::json& j) {
  VolumeHeader h;
  try {
    h.dims = j.at("dims").get<std::array<int, 3>>();
    h.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
    h.origin_mm = j.at("origin_mm").get<std::array<double, 3>>();
    h.dtype = j.at("dtype").get<std::string>();
    h.order = j.at("order").get<std::string>();
    h.kind = j.value("kind", std::string(h.dtype == "u8" ? "label" : "scalar"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed volume header: ") + e.what());
  }
  if (h.dtype != "f32le" && h.dtype != "u8") {
    throw FormatError("unknown dtype tag '" + h.dtype + "'");
  }
  if (h.order != "x-fastest") {
    throw FormatError("unsupported order tag '" + h.order + "'");
  }
  for (int d : h.dims) {
    if (d < 1) throw FormatError("header dims must be positive");
  }
  for (double s : h.spacing_mm) {
    if (!(s > 0.0)) throw FormatError("header spacing must be positive");
  }
  return h;
}

fs::path header_path(const fs::path& stem) {
  fs::path p = stem;
  p += ".json";
  return p;
}

fs::path payload_path(const fs::path& stem) {
  fs::path p = stem;
  p += ".raw";
  return p;
}

void append_f32le(std::vector<std::uint8_t>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  out.push_back(static_cast<std::uint8_t>(bits & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xFFu));
  out.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xFFu));
}

float load_f32le(const std::uint8_t* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

std::vector<std::uint8_t> read_binary_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_binary_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_binary_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

nlohmann::json read_json_file(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

namespace {

template <class V>
VolumeHeader header_for(const V& v, const char* dtype) {
  VolumeHeader h;
  h.dims = {v.dims().nx, v.dims().ny, v.dims().nz};
  h.spacing_mm = {v.spacing().dx, v.spacing().dy, v.spacing().dz};
  h.origin_mm = {v.origin().x, v.origin().y, v.origin().z};
  h.dtype = dtype;
  h.kind = V::codes::kKind;
  return h;
}

template <class V>
void write_u8(const V& mask, const fs::path& stem) {
  write_json_file(header_path(stem), header_for(mask, "u8").to_json());
  write_binary_file(payload_path(stem),
                    std::vector<std::uint8_t>(mask.values().begin(), mask.values().end()));
}

std::vector<std::uint8_t> checked_payload(const VolumeHeader& h, const fs::path& stem) {
  auto bytes = read_binary_file(payload_path(stem));
  if (bytes.size() != h.payload_bytes()) {
    throw FormatError("payload " + payload_path(stem).string() + " has " +
                      std::to_string(bytes.size()) + " bytes, header requires " +
                      std::to_string(h.payload_bytes()));
  }
  return bytes;
}

template <class V>
V read_u8(const fs::path& stem) {
  const VolumeHeader h = read_header(stem);
  if (h.dtype != "u8") {
    throw FormatError("expected u8 payload in " + header_path(stem).string());
  }
  auto bytes = checked_payload(h, stem);
  return V(h.geometry(), std::move(bytes));  // validates codes
}

}  // namespace

void write_volume(const VoxelGrid& grid, const fs::path& stem) {
  write_json_file(header_path(stem), header_for(grid, "f32le").to_json());
  std::vector<std::uint8_t> bytes;
  bytes.reserve(grid.size() * 4);
  for (float v : grid.values()) append_f32le(bytes, v);
  write_binary_file(payload_path(stem), bytes);
}

void write_volume(const LabelMask& mask, const fs::path& stem) { write_u8(mask, stem); }

void write_volume(const SubregionMask& mask, const fs::path& stem) { write_u8(mask, stem); }

VolumeHeader read_header(const fs::path& stem) {
  return VolumeHeader::from_json(read_json_file(header_path(stem)));
}

VoxelGrid read_grid(const fs::path& stem) {
  const VolumeHeader h = read_header(stem);
  if (h.dtype != "f32le") {
    throw FormatError("expected f32le payload in " + header_path(stem).string());
  }
  const auto bytes = checked_payload(h, stem);
  std::vector<float> data(h.voxel_count());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = load_f32le(&bytes[4 * i]);
  return VoxelGrid(h.geometry(), std::move(data));
}

LabelMask read_label_mask(const fs::path& stem) { return read_u8<LabelMask>(stem); }

SubregionMask read_subregion_mask(const fs::path& stem) {
  return read_u8<SubregionMask>(stem);
}

std::variant<VoxelGrid, LabelMask> read_volume(const fs::path& stem) {
  const VolumeHeader h = read_header(stem);
  if (h.dtype == "f32le") return read_grid(stem);
  return read_label_mask(stem);
}

}  // namespace ctm::io
