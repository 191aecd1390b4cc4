#pragma once

// Voxelwise precision/recall, ROC/AUC, measurement MSE and report files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/geometry.hpp"
#include "ctm/grid.hpp"
#include "ctm/measurements.hpp"

namespace ctm::eval {

inline constexpr std::size_t kMaxRocPoints = 256;

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  /// TP / (TP + FP); nullopt when nothing was predicted.
  std::optional<double> precision() const;
  /// TP / (TP + FN); nullopt when the truth is empty.
  std::optional<double> recall() const;
  /// 2TP / (2TP + FP + FN); nullopt when both sets are empty.
  std::optional<double> dice() const;
};

/// Voxelwise counts for one organ label. Raises ShapeError on differing dims.
Confusion confusion(const LabelMask& pred, const LabelMask& truth, OrganId organ);

struct PrecisionRecall {
  std::optional<double> precision;
  std::optional<double> recall;
};

PrecisionRecall precision_recall(const LabelMask& pred, const LabelMask& truth, OrganId organ);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
  bool operator==(const RocPoint&) const = default;
};

struct RocResult {
  std::optional<double> auc;   // nullopt when the truth holds one class only
  std::vector<RocPoint> points;  // descending threshold, from (0,0) to (1,1)
};

/// A voxel is called positive at threshold t when its score is >= t. Thresholds
/// are +inf, every distinct score in descending order, then -inf. The AUC is
/// the trapezoid over the full curve; `points` is thinned to at most
/// `max_points` evenly spaced entries that keep both endpoints.
RocResult roc_auc(std::span<const float> scores, std::span<const std::uint8_t> positive,
                  std::size_t max_points = kMaxRocPoints);

/// Mean squared difference after dividing each pair by its scale; nullopt for empty input.
std::optional<double> measurement_mse(std::span<const double> predicted,
                                      std::span<const double> truth,
                                      std::span<const double> scales);

struct OrganMetrics {
  std::optional<double> precision;
  std::optional<double> recall;
  std::optional<double> auc;
  std::optional<double> mse;      // learned vs truth, normalized units
  std::optional<double> mse_raw;  // learned vs truth, raw units
  std::optional<double> dice;
  std::optional<double> mean_iou;  // best-proposal IoU against the true box
  std::optional<double> learned_volume_rel_error;
  std::optional<double> geometric_volume_rel_error;
};

struct CaseMeasurement {
  std::string id;
  geo::GeoMeasurements geometric;
  std::optional<Measurements> learned;
  std::optional<Measurements> truth;
  std::optional<double> best_iou;
};

struct OrganReport {
  OrganId organ = OrganId::Liver;
  OrganMetrics metrics;
  std::vector<RocPoint> roc;
  std::vector<CaseMeasurement> cases;
};

struct MeasurementReport {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<OrganReport> organs;

  nlohmann::json to_json() const;
};

/// Writes report.json and roc.csv into `dir`. Organs appear in the published
/// table order regardless of their order in `report`; each organ at most once.
void emit_report(const MeasurementReport& report, const std::filesystem::path& dir);

std::string roc_csv(const MeasurementReport& report);

struct RocRow {
  OrganId organ;
  RocPoint point;
};
std::vector<RocRow> parse_roc_csv(const std::string& text);

}  // namespace ctm::eval
