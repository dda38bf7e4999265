#include "tiednet/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tiednet/error.hpp"

namespace tiednet {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw ValidationError("optimizer", "unknown optimizer '" + std::string(name) +
                                         "' (expected sgd or adamw)");
}

ScheduleKind parse_schedule(std::string_view name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ValidationError("schedule", "unknown schedule '" + std::string(name) +
                                        "' (expected constant or cosine)");
}

const char* optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adamw";
}

const char* schedule_name(ScheduleKind kind) {
  return kind == ScheduleKind::constant ? "constant" : "cosine";
}

double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step) {
  if (cfg.schedule == ScheduleKind::constant || cfg.total_steps <= 0) {
    return cfg.lr;
  }
  const std::int64_t total = cfg.total_steps;
  const std::int64_t warmup = total / 20;
  if (step < warmup) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / span);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

Tensor& slot(TrainState& state, const Parameter& p, const char* name,
             bool* created = nullptr) {
  const std::string key = p.name + "." + name;
  auto it = state.slots.find(key);
  if (created) *created = it == state.slots.end();
  if (it == state.slots.end()) {
    it = state.slots.emplace(key, Tensor::zeros(p.value.dims(), p.value.dtype()))
             .first;
  } else if (it->second.dims() != p.value.dims() ||
             it->second.dtype() != p.value.dtype()) {
    throw ShapeError("optimizer slot '" + key + "' is " +
                     shape_str(it->second.dims()) + ", parameter is " +
                     shape_str(p.value.dims()));
  }
  return it->second;
}

}  // namespace

void optimizer_step(const std::vector<ParamPtr>& params, TrainState& state) {
  const auto& cfg = state.opt;
  const double lr = scheduled_lr(cfg, state.step);
  const std::int64_t t = state.step + 1;
  for (const auto& p : params) {
    if (!p->trainable) continue;
    if (!p->value.is_contiguous()) {
      throw ContractError("optimizer: parameter '" + p->name +
                          "' is not contiguous");
    }
    const auto n = p->value.numel();
    if (cfg.kind == OptimizerKind::sgd) {
      bool first = false;
      Tensor& buf = slot(state, *p, "momentum", &first);
      dispatch(p->value.dtype(), [&]<typename T>() {
        T* w = p->value.data<T>();
        const T* g = p->grad.data<T>();
        T* b = buf.data<T>();
        for (std::int64_t i = 0; i < n; ++i) {
          double grad = g[i] + cfg.weight_decay * w[i];
          const double m =
              first || cfg.momentum == 0.0 ? grad : cfg.momentum * b[i] + grad;
          b[i] = static_cast<T>(m);
          w[i] = static_cast<T>(w[i] - lr * m);
        }
      });
    } else {
      Tensor& m1 = slot(state, *p, "exp_avg");
      Tensor& m2 = slot(state, *p, "exp_avg_sq");
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      dispatch(p->value.dtype(), [&]<typename T>() {
        T* w = p->value.data<T>();
        const T* g = p->grad.data<T>();
        T* a = m1.data<T>();
        T* v = m2.data<T>();
        for (std::int64_t i = 0; i < n; ++i) {
          const double grad = g[i];
          const double mean = cfg.beta1 * a[i] + (1.0 - cfg.beta1) * grad;
          const double sq = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
          a[i] = static_cast<T>(mean);
          v[i] = static_cast<T>(sq);
          const double decayed = w[i] * (1.0 - lr * cfg.weight_decay);
          const double denom = std::sqrt(sq / c2) + cfg.eps;
          w[i] = static_cast<T>(decayed - lr * (mean / c1) / denom);
        }
      });
    }
  }
  ++state.step;
}

}  // namespace tiednet
