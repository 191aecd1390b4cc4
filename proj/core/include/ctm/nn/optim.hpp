#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctm/nn/tensor.hpp"

namespace ctm::nn {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// First and second moments plus step count for one parameter tensor.
struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam step on a flat parameter array.
template <class T>
void adam_update(std::span<T> w, std::span<const T> g, AdamState& state, const AdamConfig& cfg,
                 double lr);

/// Adam over every parameter of a ParamSet. The set's pointers must outlive the optimizer.
template <class T>
class Adam {
 public:
  Adam(ParamSet<T> params, AdamConfig cfg = {});

  void step(double lr);
  void zero_grad() { params_.zero_grad(); }
  std::int64_t steps() const { return states_.empty() ? 0 : states_.front().t; }
  const AdamConfig& config() const { return cfg_; }

 private:
  ParamSet<T> params_;
  AdamConfig cfg_;
  std::vector<AdamState> states_;
};

struct CosineAnnealing {
  double lr0 = 0.01;
  double period = 1.0;  // T, in epochs
  double lr_min = 0.0;
};

struct StepDecay {
  double lr0 = 0.002;
  double factor = 0.8;
  int period_epochs = 15;
};

struct ConstantLr {
  double lr = 0.001;
};

using LrSchedule = std::variant<CosineAnnealing, StepDecay, ConstantLr>;

void validate(const LrSchedule& s);

/// Learning rate at fractional epoch `t` (completed epochs plus the fraction of
/// the current one). Cosine clamps t to [0, T]; step decay uses floor(t / period).
double schedule_lr(const LrSchedule& s, double t);

/// Convenience form: t = epoch + step / steps_per_epoch.
double schedule_lr(const LrSchedule& s, int epoch, int step, int steps_per_epoch);

nlohmann::json schedule_to_json(const LrSchedule& s);
LrSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace ctm::nn
