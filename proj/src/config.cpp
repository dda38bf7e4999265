#include "tiednet/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tiednet/error.hpp"

namespace tiednet {

using nlohmann::json;

namespace {

const std::set<std::string> kCommonKeys{"family", "variant", "image_size",
                                        "num_classes", "dtype"};
const std::set<std::string> kVitKeys{"dim",   "depth",    "heads", "mlp_ratio",
                                     "patch", "qkv_bias", "qk_dim"};
const std::set<std::string> kResnetKeys{"resnet_layers", "pe_stages",
                                        "stage_sharing", "base_width"};

[[noreturn]] void invalid(const std::string& field, const std::string& msg) {
  throw ValidationError(field, "config field '" + field + "': " + msg);
}

std::int64_t get_int(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::floor(d) == d && std::abs(d) < 9e15) {
      return static_cast<std::int64_t>(d);
    }
  }
  invalid(key, "expected an integer");
}

double get_number(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_number()) invalid(key, "expected a number");
  return v.get<double>();
}

bool get_bool(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_boolean()) invalid(key, "expected true or false");
  return v.get<bool>();
}

std::string get_string(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_string()) invalid(key, "expected a string");
  return v.get<std::string>();
}

std::vector<std::int64_t> get_int_list(const json& j, const std::string& key) {
  const json& v = j.at(key);
  if (!v.is_array()) invalid(key, "expected an array of integers");
  std::vector<std::int64_t> out;
  for (const auto& e : v) {
    if (!e.is_number_integer()) invalid(key, "expected an array of integers");
    out.push_back(e.get<std::int64_t>());
  }
  return out;
}

void require_positive(std::int64_t value, const std::string& field) {
  if (value < 1) invalid(field, "must be >= 1, got " + std::to_string(value));
}

}  // namespace

std::int64_t ModelConfig::hidden() const {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(dim) * mlp_ratio));
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.family != "vit" && cfg.family != "resnet") {
    invalid("family", "expected \"vit\" or \"resnet\", got \"" + cfg.family + "\"");
  }
  if (cfg.variant != "baseline" && cfg.variant != "pe") {
    invalid("variant", "expected \"baseline\" or \"pe\", got \"" + cfg.variant + "\"");
  }
  require_positive(cfg.image_size, "image_size");
  require_positive(cfg.num_classes, "num_classes");

  if (cfg.is_vit()) {
    require_positive(cfg.dim, "dim");
    require_positive(cfg.depth, "depth");
    require_positive(cfg.heads, "heads");
    require_positive(cfg.patch, "patch");
    if (cfg.dim % cfg.heads != 0) {
      invalid("heads", "dim " + std::to_string(cfg.dim) +
                           " is not divisible by heads " +
                           std::to_string(cfg.heads));
    }
    if (cfg.qk_dim < 0) invalid("qk_dim", "must be >= 1");
    if (cfg.attention_qk_dim() % cfg.heads != 0) {
      invalid("qk_dim", "not divisible by heads " + std::to_string(cfg.heads));
    }
    if (!(cfg.mlp_ratio > 0.0) || !std::isfinite(cfg.mlp_ratio)) {
      invalid("mlp_ratio", "must be > 0");
    }
    const double hidden = static_cast<double>(cfg.dim) * cfg.mlp_ratio;
    if (std::abs(hidden - std::round(hidden)) > 1e-9 || std::round(hidden) < 1) {
      invalid("mlp_ratio", "dim * mlp_ratio must be a positive integer");
    }
    if (cfg.image_size % cfg.patch != 0) {
      invalid("patch", "image_size " + std::to_string(cfg.image_size) +
                           " is not divisible by patch " +
                           std::to_string(cfg.patch));
    }
  } else {
    if (cfg.resnet_layers.size() != 4) {
      invalid("resnet_layers", "expected 4 per-stage block counts");
    }
    for (auto n : cfg.resnet_layers) require_positive(n, "resnet_layers");
    require_positive(cfg.base_width, "base_width");
    if (!cfg.is_pe() && !cfg.pe_stages.empty()) {
      invalid("pe_stages", "must be empty unless variant is \"pe\"");
    }
    std::set<std::int64_t> seen;
    for (auto s : cfg.pe_stages) {
      if (s < 1 || s > 4) invalid("pe_stages", "stage indices must be in 1..4");
      if (!seen.insert(s).second) invalid("pe_stages", "duplicate stage index");
    }
  }
}

ModelConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed config JSON: ") + e.what(), e.byte);
  }
  if (!j.is_object()) throw ParseError("config JSON must be an object", 0);

  if (!j.contains("family")) invalid("family", "missing required key");
  ModelConfig cfg;
  cfg.family = get_string(j, "family");
  if (cfg.family != "vit" && cfg.family != "resnet") {
    invalid("family", "expected \"vit\" or \"resnet\", got \"" + cfg.family + "\"");
  }
  const auto& family_keys = cfg.is_vit() ? kVitKeys : kResnetKeys;
  for (const auto& [key, value] : j.items()) {
    if (!kCommonKeys.count(key) && !family_keys.count(key)) {
      const bool other = kVitKeys.count(key) || kResnetKeys.count(key);
      invalid(key, other ? "not applicable to family \"" + cfg.family + "\""
                         : "unknown key");
    }
  }

  if (j.contains("variant")) cfg.variant = get_string(j, "variant");
  if (j.contains("image_size")) cfg.image_size = get_int(j, "image_size");
  if (j.contains("num_classes")) cfg.num_classes = get_int(j, "num_classes");
  if (j.contains("dtype")) {
    const auto d = get_string(j, "dtype");
    if (d == "f32") {
      cfg.dtype = DType::f32;
    } else if (d == "f64") {
      cfg.dtype = DType::f64;
    } else {
      invalid("dtype", "expected \"f32\" or \"f64\", got \"" + d + "\"");
    }
  }

  if (cfg.is_vit()) {
    if (j.contains("dim")) cfg.dim = get_int(j, "dim");
    if (j.contains("depth")) cfg.depth = get_int(j, "depth");
    if (j.contains("heads")) cfg.heads = get_int(j, "heads");
    if (j.contains("mlp_ratio")) cfg.mlp_ratio = get_number(j, "mlp_ratio");
    if (j.contains("patch")) cfg.patch = get_int(j, "patch");
    if (j.contains("qkv_bias")) cfg.qkv_bias = get_bool(j, "qkv_bias");
    if (j.contains("qk_dim")) cfg.qk_dim = get_int(j, "qk_dim");
  } else {
    if (j.contains("resnet_layers")) {
      cfg.resnet_layers = get_int_list(j, "resnet_layers");
    }
    if (j.contains("base_width")) cfg.base_width = get_int(j, "base_width");
    if (j.contains("stage_sharing")) {
      cfg.stage_sharing = get_bool(j, "stage_sharing");
    }
    if (j.contains("pe_stages")) {
      cfg.pe_stages = get_int_list(j, "pe_stages");
    } else if (cfg.variant == "pe") {
      cfg.pe_stages = {1, 2, 3, 4};
    }
    std::sort(cfg.pe_stages.begin(), cfg.pe_stages.end());
  }
  validate_config(cfg);
  return cfg;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  } catch (const ValidationError& e) {
    throw ValidationError(e.field(), path + ": " + e.what());
  }
}

std::string config_to_json(const ModelConfig& cfg) {
  json j;  // object keys are kept sorted
  j["family"] = cfg.family;
  j["variant"] = cfg.variant;
  j["image_size"] = cfg.image_size;
  j["num_classes"] = cfg.num_classes;
  j["dtype"] = dtype_name(cfg.dtype);
  if (cfg.is_vit()) {
    j["dim"] = cfg.dim;
    j["depth"] = cfg.depth;
    j["heads"] = cfg.heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["patch"] = cfg.patch;
    j["qkv_bias"] = cfg.qkv_bias;
    if (cfg.qk_dim > 0) j["qk_dim"] = cfg.qk_dim;
  } else {
    j["resnet_layers"] = cfg.resnet_layers;
    j["pe_stages"] = cfg.pe_stages;
    j["stage_sharing"] = cfg.stage_sharing;
    j["base_width"] = cfg.base_width;
  }
  return j.dump();
}

}  // namespace tiednet
