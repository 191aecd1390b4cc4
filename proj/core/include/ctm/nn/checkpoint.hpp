#pragma once

// Checkpoint container.
//
//   <stem>.json  format, version, model, epoch, schedule, config, tensors[{name, shape, kind}]
//   <stem>.raw   f32 little-endian values of every tensor in the declared order

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "ctm/nn/tensor.hpp"

namespace ctm::nn {

struct CheckpointMeta {
  std::string model;
  int epoch = 0;
  nlohmann::json schedule = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const std::filesystem::path& stem, const ParamSet<T>& set,
                     const CheckpointMeta& meta);

/// Reads just the header.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& stem);

/// Loads values into `set`. Any difference in model name, tensor names, order,
/// shapes, or payload size raises FormatError.
template <class T>
CheckpointMeta load_checkpoint(const std::filesystem::path& stem, ParamSet<T>& set,
                               const std::string& expected_model);

}  // namespace ctm::nn
