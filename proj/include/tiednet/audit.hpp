#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tiednet/model.hpp"

namespace tiednet {

struct AuditRow {
  std::string name;
  std::int64_t params = 0;         // trainable scalars the layer reads
  std::int64_t matrix_params = 0;  // the rank >= 2 part of `params`
  std::int64_t macs = 0;
  bool shared = false;  // reads a Parameter that another row also reads
};

struct AuditReport {
  ModelConfig config;
  std::int64_t resolution = 0;
  std::int64_t total_params = 0;  // distinct trainable storages, each once
  std::int64_t total_macs = 0;
  std::vector<AuditRow> layers;
  // Parameters of the repeated body (encoder layers / bottleneck stages).
  std::int64_t body_params = 0;
  std::int64_t bias_params = 0;  // rank-1 trainable scalars inside the body
};

// Scalars over distinct trainable Parameter storages.
std::int64_t count_params(const Model& model);
// Analytic forward MACs for one image at `resolution`.
std::int64_t count_macs(const Model& model, std::int64_t resolution);
// MACs issued by an actual batch-1 forward pass (eval mode, no tape).
std::int64_t measure_macs(Model& model);

AuditReport audit_model(const Model& model, std::int64_t resolution);

std::string report_json(const AuditReport& report);
std::string report_text(const AuditReport& report);
// Human-readable statement of which weights are tied and shared.
std::string tying_policy(const ModelConfig& cfg);

// Side-by-side totals, ratios (b / a) and a per-layer diff.
std::string compare_text(const AuditReport& a, const AuditReport& b);
std::string compare_json(const AuditReport& a, const AuditReport& b);

}  // namespace tiednet
