#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tiednet/tensor.hpp"

namespace tiednet {

// Declarative architecture description. Keys not applicable to the chosen
// family are rejected by the parser rather than ignored.
struct ModelConfig {
  std::string family;               // "vit" | "resnet"
  std::string variant = "baseline"; // "baseline" | "pe"

  // vit
  std::int64_t dim = 384;
  std::int64_t depth = 12;
  std::int64_t heads = 6;
  double mlp_ratio = 4.0;
  std::int64_t patch = 16;
  bool qkv_bias = true;
  std::int64_t qk_dim = 0;  // 0: same as dim

  // resnet
  std::vector<std::int64_t> resnet_layers{3, 4, 6, 3};
  std::vector<std::int64_t> pe_stages;
  bool stage_sharing = true;
  std::int64_t base_width = 64;

  // shared
  std::int64_t image_size = 224;
  std::int64_t num_classes = 1000;
  DType dtype = DType::f32;

  bool is_vit() const { return family == "vit"; }
  bool is_pe() const { return variant == "pe"; }
  std::int64_t hidden() const;  // FFN width, dim * mlp_ratio
  std::int64_t attention_qk_dim() const { return qk_dim > 0 ? qk_dim : dim; }
};

// Strict JSON parsing: malformed text raises ParseError (with byte offset),
// invariant violations and unknown keys raise ValidationError naming the key.
ModelConfig parse_config(std::string_view text);
ModelConfig load_config(const std::string& path);

// Re-checks every invariant of an already populated config.
void validate_config(const ModelConfig& cfg);

// Canonical JSON echo (sorted keys, family-applicable fields only).
std::string config_to_json(const ModelConfig& cfg);

}  // namespace tiednet
