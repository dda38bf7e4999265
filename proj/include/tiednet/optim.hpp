#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tiednet/autograd.hpp"

namespace tiednet {

enum class OptimizerKind { sgd, adamw };
enum class ScheduleKind { constant, cosine };

OptimizerKind parse_optimizer(std::string_view name);
ScheduleKind parse_schedule(std::string_view name);
const char* optimizer_name(OptimizerKind kind);
const char* schedule_name(ScheduleKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 0.01;
  ScheduleKind schedule = ScheduleKind::constant;
  std::int64_t total_steps = 0;  // schedule horizon
  double momentum = 0.9;         // sgd
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adamw
  double weight_decay = 0.0;
};

// Learning rate used at 0-based `step`. Cosine: linear warmup over the first
// 5% of total_steps, then cosine decay to zero.
double scheduled_lr(const OptimizerConfig& cfg, std::int64_t step);

struct TrainState {
  OptimizerConfig opt;
  std::int64_t step = 0;   // completed optimizer steps
  std::uint64_t seed = 0;  // drives batch order
  // Per-parameter optimizer slots keyed by "<param name>.<slot>":
  // sgd "momentum"; adamw "exp_avg", "exp_avg_sq".
  std::map<std::string, Tensor> slots;
};

// Applies one update to every trainable parameter from its accumulated
// grad, using and advancing `state` (slots are created on first use). SGD
// follows the heavy-ball form buf = m * buf + g (buf = g on the first step),
// AdamW uses decoupled weight decay and bias-corrected moments.
void optimizer_step(const std::vector<ParamPtr>& params, TrainState& state);

}  // namespace tiednet
