#include "ctm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "ctm/io.hpp"

namespace ctm::eval {

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<const OrganReport*> ordered(const MeasurementReport& report) {
  std::vector<const OrganReport*> out;
  for (OrganId organ : kReportOrder) {
    const OrganReport* found = nullptr;
    for (const auto& o : report.organs) {
      if (o.organ != organ) continue;
      if (found) throw ValidationError("organ " + std::string(organ_name(organ)) + " reported twice");
      found = &o;
    }
    if (found) out.push_back(found);
  }
  return out;
}

}  // namespace

std::optional<double> Confusion::precision() const {
  if (tp + fp == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

std::optional<double> Confusion::recall() const {
  if (tp + fn == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

std::optional<double> Confusion::dice() const {
  if (2 * tp + fp + fn == 0) return std::nullopt;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

Confusion confusion(const LabelMask& pred, const LabelMask& truth, OrganId organ) {
  if (pred.dims() != truth.dims()) throw ShapeError("prediction and truth dims differ");
  const std::uint8_t label = label_of(organ);
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == label;
    const bool t = truth[i] == label;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

PrecisionRecall precision_recall(const LabelMask& pred, const LabelMask& truth, OrganId organ) {
  const Confusion c = confusion(pred, truth, organ);
  return {c.precision(), c.recall()};
}

RocResult roc_auc(std::span<const float> scores, std::span<const std::uint8_t> positive,
                  std::size_t max_points) {
  if (scores.size() != positive.size()) throw ShapeError("roc scores and labels differ in length");
  if (max_points < 2) throw ParameterError("roc max_points must be >= 2");
  std::int64_t pos = 0;
  for (auto v : positive) pos += v != 0;
  const std::int64_t neg = static_cast<std::int64_t>(positive.size()) - pos;

  std::vector<std::uint32_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });

  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, std::pair<std::int64_t, std::int64_t>>> raw;  // (t, (tp, fp))
  raw.push_back({inf, {0, 0}});
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      if (positive[order[i]]) ++tp;
      else ++fp;
      ++i;
    }
    raw.push_back({static_cast<double>(s), {tp, fp}});
  }
  raw.push_back({-inf, {pos, neg}});

  RocResult r;
  auto rate = [](std::int64_t k, std::int64_t n) {
    return n == 0 ? 0.0 : static_cast<double>(k) / static_cast<double>(n);
  };
  std::vector<RocPoint> full;
  full.reserve(raw.size());
  for (const auto& [t, c] : raw) full.push_back({t, rate(c.second, neg), rate(c.first, pos)});
  if (pos > 0 && neg > 0) {
    // Integer trapezoid sums avoid rounding drift on long curves.
    long double area = 0.0L;
    for (std::size_t i = 1; i < raw.size(); ++i) {
      const auto [tp1, fp1] = raw[i].second;
      const auto [tp0, fp0] = raw[i - 1].second;
      area += static_cast<long double>(fp1 - fp0) * static_cast<long double>(tp1 + tp0);
    }
    r.auc = static_cast<double>(area / (2.0L * pos * neg));
  }
  if (full.size() <= max_points) {
    r.points = std::move(full);
  } else {
    const std::size_t n = full.size();
    for (std::size_t k = 0; k < max_points; ++k) {
      const std::size_t idx = (k * (n - 1) + (max_points - 1) / 2) / (max_points - 1);
      r.points.push_back(full[idx]);
    }
  }
  return r;
}

std::optional<double> measurement_mse(std::span<const double> predicted,
                                      std::span<const double> truth,
                                      std::span<const double> scales) {
  if (predicted.size() != truth.size() || predicted.size() != scales.size()) {
    throw ParameterError("measurement_mse inputs differ in length");
  }
  if (predicted.empty()) return std::nullopt;
  double sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (!(scales[i] > 0.0)) throw ParameterError("measurement scale must be positive");
    const double d = (predicted[i] - truth[i]) / scales[i];
    sum += d * d;
  }
  return sum / static_cast<double>(predicted.size());
}

nlohmann::json MeasurementReport::to_json() const {
  nlohmann::json organs_json = nlohmann::json::array();
  for (const OrganReport* o : ordered(*this)) {
    const OrganMetrics& m = o->metrics;
    nlohmann::json geometric = nlohmann::json::array();
    nlohmann::json learned = nlohmann::json::array();
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : o->cases) {
      nlohmann::json g = c.geometric.to_json(o->organ);
      g["case"] = c.id;
      geometric.push_back(g);
      if (c.learned) {
        nlohmann::json l = c.learned->to_json(o->organ);
        l["case"] = c.id;
        l["provenance"] = "learned";
        learned.push_back(l);
      }
      cases.push_back({{"case", c.id},
                       {"best_iou", opt(c.best_iou)},
                       {"truth", c.truth ? c.truth->to_json(o->organ) : nlohmann::json(nullptr)}});
    }
    organs_json.push_back({{"organ", std::string(organ_name(o->organ))},
                           {"precision", opt(m.precision)},
                           {"recall", opt(m.recall)},
                           {"auc", opt(m.auc)},
                           {"mse", opt(m.mse)},
                           {"mse_raw", opt(m.mse_raw)},
                           {"dice", opt(m.dice)},
                           {"mean_iou", opt(m.mean_iou)},
                           {"learned_volume_rel_error", opt(m.learned_volume_rel_error)},
                           {"geometric_volume_rel_error", opt(m.geometric_volume_rel_error)},
                           {"roc_points", o->roc.size()},
                           {"measurements_geometric", geometric},
                           {"measurements_learned", learned},
                           {"cases", cases}});
  }
  return {{"format", "ctm-report"},
          {"version", 1},
          {"config_digest", config_digest},
          {"seed", seed},
          {"organs", organs_json}};
}

std::string roc_csv(const MeasurementReport& report) {
  std::string out = "organ,threshold,fpr,tpr\n";
  for (const OrganReport* o : ordered(report)) {
    for (const auto& p : o->roc) {
      out += std::string(organ_name(o->organ)) + "," + format_double(p.threshold) + "," +
             format_double(p.fpr) + "," + format_double(p.tpr) + "\n";
    }
  }
  return out;
}

void emit_report(const MeasurementReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_json_file(dir / "report.json", report.to_json());
  io::write_text_file(dir / "roc.csv", roc_csv(report));
}

std::vector<RocRow> parse_roc_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "organ,threshold,fpr,tpr") {
    throw FormatError("roc.csv: unexpected header");
  }
  std::vector<RocRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1) {
      f.push_back(line.substr(start, pos - start));
    }
    f.push_back(line.substr(start));
    if (f.size() != 4) throw FormatError("roc.csv: expected 4 fields in '" + line + "'");
    auto num = [&](const std::string& s) {
      char* end = nullptr;
      const double v = std::strtod(s.c_str(), &end);
      if (end == s.c_str() || *end != '\0') throw FormatError("roc.csv: bad number '" + s + "'");
      return v;
    };
    rows.push_back({organ_from_name(f[0]), {num(f[1]), num(f[2]), num(f[3])}});
  }
  return rows;
}

}  // namespace ctm::eval
