#include "tiednet/audit.hpp"

#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tiednet {

using nlohmann::ordered_json;

namespace {

bool is_body_row(const std::string& name) {
  return name.rfind("encoder.", 0) == 0 || name.rfind("stage", 0) == 0;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return left ? s + fill : fill + s;
}

std::string variant_label(const ModelConfig& cfg) {
  return cfg.family + "/" + cfg.variant;
}

}  // namespace

std::int64_t count_params(const Model& model) {
  std::set<const void*> storages;
  std::int64_t total = 0;
  for (const auto& p : model.parameters()) {
    if (!p->trainable) continue;
    if (storages.insert(p->value.storage_id()).second) total += p->value.numel();
  }
  return total;
}

std::int64_t count_macs(const Model& model, std::int64_t resolution) {
  std::int64_t total = 0;
  for (const auto& row : model.layer_usage(resolution)) total += row.macs;
  return total;
}

std::int64_t measure_macs(Model& model) {
  const auto& cfg = model.config();
  const Tensor images = Tensor::zeros({1, 3, cfg.image_size, cfg.image_size}, cfg.dtype);
  NoGradGuard no_grad;
  model.set_mode(NormMode::eval);
  MacCounter counter;
  model.forward(images);
  model.set_mode(NormMode::train);
  return counter.total();
}

AuditReport audit_model(const Model& model, std::int64_t resolution) {
  AuditReport report;
  report.config = model.config();
  report.resolution = resolution;
  report.total_params = count_params(model);

  const auto usage = model.layer_usage(resolution);
  std::map<const Parameter*, int> readers;
  for (const auto& row : usage) {
    for (const auto& p : row.params) ++readers[p.get()];
  }
  std::set<const Parameter*> body_seen;
  for (const auto& row : usage) {
    AuditRow r;
    r.name = row.name;
    r.macs = row.macs;
    for (const auto& p : row.params) {
      if (!p->trainable) continue;
      r.params += p->value.numel();
      if (p->value.rank() >= 2) r.matrix_params += p->value.numel();
      if (readers[p.get()] > 1) r.shared = true;
      if (is_body_row(row.name) && body_seen.insert(p.get()).second) {
        report.body_params += p->value.numel();
        if (p->value.rank() == 1 && p->name.find("gamma") == std::string::npos &&
            p->name.find("beta") == std::string::npos) {
          report.bias_params += p->value.numel();
        }
      }
    }
    report.total_macs += r.macs;
    report.layers.push_back(std::move(r));
  }
  return report;
}

std::string report_json(const AuditReport& report) {
  ordered_json j;
  j["total_params"] = report.total_params;
  j["total_macs"] = report.total_macs;
  j["resolution"] = report.resolution;
  j["layers"] = ordered_json::array();
  for (const auto& r : report.layers) {
    j["layers"].push_back(
        {{"name", r.name}, {"params", r.params}, {"macs", r.macs}, {"shared", r.shared}});
  }
  return j.dump(2) + "\n";
}

std::string tying_policy(const ModelConfig& cfg) {
  if (!cfg.is_pe()) return "none (baseline: every layer holds its own weights)";
  if (cfg.is_vit()) {
    return "every encoder layer: attention keeps W_q and W_kv (value = W_kv^T, "
           "output projection = W_q^T); FFN keeps one W (second matrix = W^T); "
           "biases and norms untied";
  }
  std::string stages;
  for (auto s : cfg.pe_stages) stages += (stages.empty() ? "" : ",") + std::to_string(s);
  std::string out = "stages [" + stages +
                    "]: first block of each stage stays a conventional "
                    "downsampling bottleneck; the identity blocks use one 1x1 "
                    "weight W (reduce = W, expand = W^T)";
  out += cfg.stage_sharing ? ", W shared by all identity blocks of the stage"
                           : ", W private per block";
  out += "; 3x3 convolutions and batch norms private per block";
  return out;
}

std::string report_text(const AuditReport& report) {
  const auto& cfg = report.config;
  std::ostringstream os;
  os << "model       " << variant_label(cfg) << "\n";
  os << "resolution  " << report.resolution << "\n";
  os << "policy      " << tying_policy(cfg) << "\n";
  os << "params      " << report.total_params << " ("
     << fixed(report.total_params / 1e6, 3) << "M, shared weights counted once)\n";
  os << "macs        " << report.total_macs << " ("
     << fixed(report.total_macs / 1e9, 3)
     << " GMACs (reported as FLOPs per paper convention))\n";
  if (cfg.is_vit()) {
    const std::int64_t without = report.total_params - report.bias_params;
    os << "bias note   encoder biases (q, k, v, proj, ffn) are kept untied: "
       << report.bias_params << " params (" << fixed(report.bias_params / 1e6, 3)
       << "M); total without them " << without << " ("
       << fixed(without / 1e6, 3) << "M)\n";
  }
  os << "\n"
     << pad("layer", 22, true) << pad("params", 12) << pad("matrix", 12)
     << pad("macs", 14) << "\n";
  for (const auto& r : report.layers) {
    os << pad(r.name, 22, true) << pad(std::to_string(r.params), 12)
       << pad(std::to_string(r.matrix_params), 12)
       << pad(std::to_string(r.macs), 14) << (r.shared ? "  (shared)" : "")
       << "\n";
  }
  return os.str();
}

namespace {

struct DiffRow {
  std::string name;
  std::int64_t params_a = 0, params_b = 0, macs_a = 0, macs_b = 0;
};

std::vector<DiffRow> diff_rows(const AuditReport& a, const AuditReport& b) {
  std::vector<DiffRow> rows;
  std::map<std::string, std::size_t> index;
  for (const auto& r : a.layers) {
    index[r.name] = rows.size();
    rows.push_back({r.name, r.params, 0, r.macs, 0});
  }
  for (const auto& r : b.layers) {
    auto it = index.find(r.name);
    if (it == index.end()) {
      index[r.name] = rows.size();
      rows.push_back({r.name, 0, r.params, 0, r.macs});
    } else {
      rows[it->second].params_b = r.params;
      rows[it->second].macs_b = r.macs;
    }
  }
  return rows;
}

}  // namespace

std::string compare_text(const AuditReport& a, const AuditReport& b) {
  std::ostringstream os;
  if (a.config.family != b.config.family) {
    os << "warning: comparing different families (" << a.config.family
       << " vs " << b.config.family << ")\n";
  }
  os << pad("", 22, true) << pad("a", 16) << pad("b", 16) << "\n";
  os << pad("model", 22, true) << pad(variant_label(a.config), 16)
     << pad(variant_label(b.config), 16) << "\n";
  os << pad("total params", 22, true) << pad(std::to_string(a.total_params), 16)
     << pad(std::to_string(b.total_params), 16) << "\n";
  os << pad("total macs", 22, true) << pad(std::to_string(a.total_macs), 16)
     << pad(std::to_string(b.total_macs), 16) << "\n";
  os << pad("body params", 22, true) << pad(std::to_string(a.body_params), 16)
     << pad(std::to_string(b.body_params), 16) << "\n";
  os << "params ratio (b/a)       " << fixed(ratio(b.total_params, a.total_params), 4) << "\n";
  os << "macs ratio (b/a)         " << fixed(ratio(b.total_macs, a.total_macs), 4) << "\n";
  os << "body params ratio (b/a)  " << fixed(ratio(b.body_params, a.body_params), 4) << "\n";
  os << "\n"
     << pad("layer", 22, true) << pad("params a", 12) << pad("params b", 12)
     << pad("diff", 12) << pad("macs diff", 12) << "\n";
  for (const auto& r : diff_rows(a, b)) {
    os << pad(r.name, 22, true) << pad(std::to_string(r.params_a), 12)
       << pad(std::to_string(r.params_b), 12)
       << pad(std::to_string(r.params_b - r.params_a), 12)
       << pad(std::to_string(r.macs_b - r.macs_a), 12) << "\n";
  }
  return os.str();
}

std::string compare_json(const AuditReport& a, const AuditReport& b) {
  ordered_json j;
  auto side = [](const AuditReport& r) {
    return ordered_json{{"model", variant_label(r.config)},
                        {"total_params", r.total_params},
                        {"total_macs", r.total_macs},
                        {"body_params", r.body_params}};
  };
  j["a"] = side(a);
  j["b"] = side(b);
  j["params_ratio"] = ratio(b.total_params, a.total_params);
  j["macs_ratio"] = ratio(b.total_macs, a.total_macs);
  j["body_params_ratio"] = ratio(b.body_params, a.body_params);
  j["same_family"] = a.config.family == b.config.family;
  j["layers"] = ordered_json::array();
  for (const auto& r : diff_rows(a, b)) {
    j["layers"].push_back({{"name", r.name},
                           {"params_a", r.params_a},
                           {"params_b", r.params_b},
                           {"macs_a", r.macs_a},
                           {"macs_b", r.macs_b}});
  }
  return j.dump(2) + "\n";
}

}  // namespace tiednet
