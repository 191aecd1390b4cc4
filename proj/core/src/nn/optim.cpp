#include "ctm/nn/optim.hpp"

#include <cmath>
#include <numbers>

namespace ctm::nn {

void AdamConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ParameterError("adam beta1 must be in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ParameterError("adam beta2 must be in (0, 1)");
  if (!(eps > 0.0)) throw ParameterError("adam eps must be positive");
}

template <class T>
void adam_update(std::span<T> w, std::span<const T> g, AdamState& state, const AdamConfig& cfg,
                 double lr) {
  if (w.size() != g.size()) throw ShapeError("adam: parameter and gradient sizes differ");
  if (state.m.size() != w.size()) {
    state.m.assign(w.size(), 0.0);
    state.v.assign(w.size(), 0.0);
    state.t = 0;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
    const double mh = state.m[i] / c1;
    const double vh = state.v[i] / c2;
    w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + cfg.eps));
  }
}

template <class T>
Adam<T>::Adam(ParamSet<T> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg), states_(params_.params.size()) {
  cfg_.validate();
}

template <class T>
void Adam<T>::step(double lr) {
  for (std::size_t k = 0; k < params_.params.size(); ++k) {
    DiffTensor<T>& p = *params_.params[k].param;
    Tensor<T>& g = p.grad();
    adam_update<T>(std::span<T>(p.value().vec()), std::span<const T>(g.vec()), states_[k], cfg_, lr);
  }
}

void validate(const LrSchedule& s) {
  std::visit(
      [](const auto& v) {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, CosineAnnealing>) {
          if (!(v.lr0 > 0.0)) throw ParameterError("cosine schedule: lr0 must be positive");
          if (!(v.period > 0.0)) throw ParameterError("cosine schedule: T must be positive");
          if (!(v.lr_min >= 0.0)) throw ParameterError("cosine schedule: lr_min must be >= 0");
        } else if constexpr (std::is_same_v<V, StepDecay>) {
          if (!(v.lr0 > 0.0)) throw ParameterError("step schedule: lr0 must be positive");
          if (!(v.factor > 0.0 && v.factor < 1.0)) {
            throw ParameterError("step schedule: factor must be in (0, 1)");
          }
          if (v.period_epochs < 1) throw ParameterError("step schedule: period must be >= 1");
        } else {
          if (!(v.lr > 0.0)) throw ParameterError("constant schedule: lr must be positive");
        }
      },
      s);
}

double schedule_lr(const LrSchedule& s, double t) {
  if (t < 0.0) throw ParameterError("schedule_lr: epoch must be >= 0");
  return std::visit(
      [t](const auto& v) -> double {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, CosineAnnealing>) {
          const double tc = std::min(t, v.period);
          return v.lr_min +
                 0.5 * (v.lr0 - v.lr_min) * (1.0 + std::cos(std::numbers::pi * tc / v.period));
        } else if constexpr (std::is_same_v<V, StepDecay>) {
          const double k = std::floor(t / v.period_epochs);
          return v.lr0 * std::pow(v.factor, k);
        } else {
          return v.lr;
        }
      },
      s);
}

double schedule_lr(const LrSchedule& s, int epoch, int step, int steps_per_epoch) {
  if (steps_per_epoch < 1) throw ParameterError("schedule_lr: steps_per_epoch must be >= 1");
  return schedule_lr(s, epoch + static_cast<double>(step) / steps_per_epoch);
}

nlohmann::json schedule_to_json(const LrSchedule& s) {
  return std::visit(
      [](const auto& v) -> nlohmann::json {
        using V = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<V, CosineAnnealing>) {
          return {{"type", "cosine"}, {"lr0", v.lr0}, {"T", v.period}, {"lr_min", v.lr_min}};
        } else if constexpr (std::is_same_v<V, StepDecay>) {
          return {{"type", "step"},
                  {"lr0", v.lr0},
                  {"factor", v.factor},
                  {"period_epochs", v.period_epochs}};
        } else {
          return {{"type", "constant"}, {"lr", v.lr}};
        }
      },
      s);
}

LrSchedule schedule_from_json(const nlohmann::json& j) {
  try {
    const std::string type = j.at("type").get<std::string>();
    LrSchedule s;
    if (type == "cosine") {
      s = CosineAnnealing{j.at("lr0").get<double>(), j.at("T").get<double>(),
                          j.value("lr_min", 0.0)};
    } else if (type == "step") {
      s = StepDecay{j.at("lr0").get<double>(), j.at("factor").get<double>(),
                    j.at("period_epochs").get<int>()};
    } else if (type == "constant") {
      s = ConstantLr{j.at("lr").get<double>()};
    } else {
      throw ConfigError("unknown schedule type '" + type + "'");
    }
    validate(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed schedule: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

template void adam_update<float>(std::span<float>, std::span<const float>, AdamState&,
                                 const AdamConfig&, double);
template void adam_update<double>(std::span<double>, std::span<const double>, AdamState&,
                                  const AdamConfig&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace ctm::nn
