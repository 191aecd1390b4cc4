#pragma once

// End-to-end workflow: phantoms, preprocessing, segmentation training and
// inference, component clean-up, measurement training and inference, and
// evaluation. Every stage reads and writes files under one output directory
// and records a stamp so that an unchanged rerun is a no-op.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/measurements.hpp"
#include "ctm/phantom.hpp"
#include "ctm/rpn.hpp"
#include "ctm/segnet.hpp"

namespace ctm::pipeline {

struct PhantomSection {
  int train_count = 40;
  int test_count = 10;
  phantom::PhantomSpec spec{};  // seed is derived from the global seed
};

struct PostprocSection {
  int min_voxels = 100;
  int connectivity = 26;
};

struct EvalSection {
  std::array<double, kNumQuantities> scales{};  // per quantity, used for the normalized MSE
  int roc_points = 256;

  EvalSection();
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output = "out";
  PhantomSection phantom;
  double target_mm = 1.5;
  seg::SegNetConfig segnet;
  seg::SegTrainConfig segnet_training;
  PostprocSection postproc;
  rpn::MeasureNetConfig measure;
  rpn::MeasureTrainConfig measure_training;
  EvalSection eval;

  void validate() const;
  /// Every hyperparameter; `output` is omitted so the digest does not depend on where results go.
  nlohmann::json to_json() const;
  /// Unknown keys raise ConfigError. Missing keys keep their defaults.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  /// SHA-256 (hex) of the canonical JSON dump.
  std::string digest() const;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

inline constexpr std::array<std::string_view, 8> kStages = {
    "gen-phantoms", "preprocess", "train-seg",     "segment",
    "postprocess",  "train-measure", "measure",   "evaluate"};

struct RunOptions {
  int threads = 1;
  /// Receives machine-readable progress events (one JSON object each).
  std::function<void(const nlohmann::json&)> progress;
  /// Receives human-readable log lines.
  std::function<void(const std::string&)> log;
};

enum class StageStatus { Ran, Skipped };

/// Runs one stage. Missing inputs raise IoError naming the absent file.
StageStatus run_stage(std::string_view stage, const PipelineConfig& cfg, const RunOptions& opts);

/// Runs every stage in order.
void run_all(const PipelineConfig& cfg, const RunOptions& opts);

/// Output layout.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path phantoms(std::string_view split) const { return root / "phantoms" / split; }
  std::filesystem::path preprocessed(std::string_view split) const {
    return root / "preprocessed" / split;
  }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path predictions() const { return root / "predictions"; }
  std::filesystem::path stamps() const { return root / "stamps"; }
  std::filesystem::path report() const { return root / "report.json"; }
  std::filesystem::path roc() const { return root / "roc.csv"; }
};

}  // namespace ctm::pipeline
