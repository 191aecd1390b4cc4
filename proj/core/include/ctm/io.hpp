#pragma once

// Raw + JSON volume container.
//
//   <stem>.json  UTF-8 header: dims, spacing_mm, origin_mm, dtype, order, kind
//   <stem>.raw   payload, little-endian, x-fastest
//
// dtype "f32le" carries 4 bytes per voxel, "u8" one byte per voxel.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/grid.hpp"

namespace ctm::io {

struct VolumeHeader {
  std::array<int, 3> dims{1, 1, 1};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  std::array<double, 3> origin_mm{0.0, 0.0, 0.0};
  std::string dtype;         // "f32le" | "u8"
  std::string order = "x-fastest";
  std::string kind;          // "scalar" | "label" | "subregion"

  std::size_t voxel_count() const;
  std::size_t payload_bytes() const;
  GridGeometry geometry() const;
  nlohmann::json to_json() const;
  static VolumeHeader from_json(const nlohmann::json& j);
};

std::filesystem::path header_path(const std::filesystem::path& stem);
std::filesystem::path payload_path(const std::filesystem::path& stem);

void write_volume(const VoxelGrid& grid, const std::filesystem::path& stem);
void write_volume(const LabelMask& mask, const std::filesystem::path& stem);
void write_volume(const SubregionMask& mask, const std::filesystem::path& stem);

VolumeHeader read_header(const std::filesystem::path& stem);

/// Reads either dtype; u8 payloads come back as a validated LabelMask.
std::variant<VoxelGrid, LabelMask> read_volume(const std::filesystem::path& stem);

VoxelGrid read_grid(const std::filesystem::path& stem);
LabelMask read_label_mask(const std::filesystem::path& stem);
SubregionMask read_subregion_mask(const std::filesystem::path& stem);

// Little-endian scalar codecs.
void append_f32le(std::vector<std::uint8_t>& out, float v);
float load_f32le(const std::uint8_t* p);

std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes `j` with two-space indent and a trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace ctm::io
