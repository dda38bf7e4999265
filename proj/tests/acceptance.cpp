// Acceptance gate: one PASS/FAIL line per criterion. Run with no arguments for
// all criteria, or with criterion numbers to run a subset. Exit status is 0
// only when every requested criterion passes.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "tiednet/audit.hpp"
#include "tiednet/checkpoint.hpp"
#include "tiednet/gradcheck.hpp"
#include "tiednet/train.hpp"

using namespace tiednet;

namespace {

// Tolerances and budgets.
constexpr double kDeitParams = 22.1e6, kDeitParamsTol = 0.2e6;
constexpr double kVitPeParams = 11.1e6, kVitPeParamsTol = 0.4e6;
constexpr double kVitMacs = 4.6e9, kResnetMacs = 4.09e9, kMacsRelTol = 0.05;
constexpr double kResnetParams = 25.6e6, kResnetParamsTol = 0.1e6;
constexpr double kPeAllLo = 12.3e6, kPeAllHi = 13.8e6;
constexpr double kPe34Lo = 12.9e6, kPe34Hi = 14.0e6;
constexpr double kGradEps = 1e-4, kGradTol = 1e-6;
constexpr int kEquivalenceSeeds = 100;
constexpr double kBackwardTol = 1e-12;
constexpr std::int64_t kMaxTrainSteps = 500;
constexpr double kMinTrainAccuracy = 0.95, kMaxLossRatio = 1.5;
constexpr std::array<double, 10> kBudgetSeconds{0, 1, 5, 5, 5, 30, 60, 300, 5, 60};

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [FAIL]");
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string config_path(const char* name) {
  return std::string(TIEDNET_CONFIG_DIR) + "/" + name;
}

AuditReport audit_config(const char* name) {
  const auto cfg = load_config(config_path(name));
  const auto model = build_layout(cfg);
  return audit_model(*model, cfg.image_size);
}

const AuditRow& find_row(const AuditReport& r, const std::string& name) {
  for (const auto& row : r.layers) {
    if (row.name == name) return row;
  }
  throw std::runtime_error("audit row '" + name + "' missing");
}

bool within(double value, double center, double tol) { return std::abs(value - center) <= tol; }

// --- 1 ----------------------------------------------------------------------

Outcome layer_halving() {
  Outcome o;
  for (auto [d, heads] : {std::pair<std::int64_t, std::int64_t>{8, 2}, {64, 4}, {384, 6}}) {
    ModelConfig cfg;
    cfg.family = "vit";
    cfg.dim = d;
    cfg.depth = 1;
    cfg.heads = heads;
    cfg.mlp_ratio = 4.0;
    cfg.patch = 8;
    cfg.image_size = 16;
    cfg.num_classes = 2;
    const auto base = audit_model(*build_model(cfg, 0), 16);
    cfg.variant = "pe";
    const auto pe = audit_model(*build_model(cfg, 0), 16);
    const auto ba = find_row(base, "encoder.0.attn").matrix_params;
    const auto pa = find_row(pe, "encoder.0.attn").matrix_params;
    const auto bf = find_row(base, "encoder.0.ffn").matrix_params;
    const auto pf = find_row(pe, "encoder.0.ffn").matrix_params;
    const bool ok = ba == 4 * d * d && pa == 2 * d * d && bf == 8 * d * d && pf == 4 * d * d &&
                    2 * pa == ba && 2 * pf == bf;
    o.require(ok, fmt("d=%lld attn %lld->%lld ffn %lld->%lld", static_cast<long long>(d),
                      static_cast<long long>(ba), static_cast<long long>(pa),
                      static_cast<long long>(bf), static_cast<long long>(pf)));
  }
  return o;
}

// --- 2 ----------------------------------------------------------------------

Outcome vit_counts() {
  Outcome o;
  const auto deit = audit_config("deit-s.json");
  const auto pe = audit_config("vit-pe.json");
  o.require(within(static_cast<double>(deit.total_params), kDeitParams, kDeitParamsTol),
            fmt("deit-s %.3fM (want 22.1 +- 0.2)", deit.total_params / 1e6));
  o.require(within(static_cast<double>(pe.total_params), kVitPeParams, kVitPeParamsTol),
            fmt("vit-pe %.3fM (want 11.1 +- 0.4)", pe.total_params / 1e6));
  o.require(report_text(pe).find("bias note") != std::string::npos,
            "bias note present in report");
  return o;
}

// --- 3 ----------------------------------------------------------------------

Outcome mac_invariance() {
  Outcome o;
  const auto deit = audit_config("deit-s.json");
  const auto pe = audit_config("vit-pe.json");
  o.require(deit.total_macs == pe.total_macs,
            fmt("vit macs %lld == %lld", static_cast<long long>(deit.total_macs),
                static_cast<long long>(pe.total_macs)));
  o.require(within(deit.total_macs, kVitMacs, kMacsRelTol * kVitMacs),
            fmt("vit %.3fG (want 4.6 +- 5%%)", deit.total_macs / 1e9));
  const auto r50 = audit_config("resnet50.json");
  for (const char* name : {"resnet50-pe.json", "resnet50-pe-s34.json"}) {
    const auto r = audit_config(name);
    o.require(r.total_macs == r50.total_macs, fmt("%s macs equal baseline", name));
  }
  o.require(within(r50.total_macs, kResnetMacs, kMacsRelTol * kResnetMacs),
            fmt("resnet50 %.3fG (want 4.09 +- 5%%)", r50.total_macs / 1e9));
  return o;
}

// --- 4 ----------------------------------------------------------------------

Outcome resnet_counts() {
  Outcome o;
  const auto r50 = audit_config("resnet50.json");
  const auto all = audit_config("resnet50-pe.json");
  const auto s34 = audit_config("resnet50-pe-s34.json");
  o.require(within(r50.total_params, kResnetParams, kResnetParamsTol),
            fmt("resnet50 %.3fM (want 25.6 +- 0.1)", r50.total_params / 1e6));
  o.require(all.total_params >= kPeAllLo && all.total_params <= kPeAllHi,
            fmt("resnet50-pe %.3fM (want 12.3..13.8)", all.total_params / 1e6));
  o.require(s34.total_params >= kPe34Lo && s34.total_params <= kPe34Hi,
            fmt("resnet50-pe stages 3-4 %.3fM (want 12.9..14.0)", s34.total_params / 1e6));
  o.require(report_text(all).find("policy      stages [1,2,3,4]") != std::string::npos &&
                report_text(s34).find("policy      stages [3,4]") != std::string::npos,
            "policy printed");
  return o;
}

// --- 5 ----------------------------------------------------------------------

Tensor random_tensor(Shape dims, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(dims)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(std::move(dims), v, DType::f64);
}

void randomize(const Module& m, std::uint64_t seed) {
  for (const auto& p : m.parameters()) {
    if (p->trainable) p->value.copy_from(random_tensor(p->value.dims(), seed++));
  }
}

std::vector<ParamPtr> trainable(const Module& m) {
  std::vector<ParamPtr> out;
  for (const auto& p : m.parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

Tensor probe(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, random_tensor(y.dims(), seed)));
}

Outcome gradient_checks() {
  Outcome o;
  GradCheckOptions opts;
  opts.eps = kGradEps;
  opts.tol = kGradTol;
  // Fixed fixtures. Finite differences are only meaningful away from relu
  // kinks, so the fixtures are pinned rather than drawn per run.
  auto check = [&](const char* name, Module& m, std::uint64_t seed, const Tensor& x) {
    randomize(m, seed);
    const auto rep =
        grad_check([&] { return probe(m.forward(x), seed + 2); }, trainable(m), opts);
    o.require(rep.passed && rep.max_rel_err < kGradTol, fmt("%s %.2e", name, rep.max_rel_err));
  };
  TiedMhaLayer attn("attn", 8, 2, true, true, DType::f64);
  check("TiedMhaLayer", attn, 30, random_tensor({2, 3, 8}, 31));
  TiedFfnLayer ffn("ffn", 3, 5, Activation::gelu, DType::f64);
  check("TiedFfnLayer", ffn, 10, random_tensor({2, 4, 3}, 11));
  TiedBottleneckBlock block("block", 4, 2, 4, 1, nullptr, DType::f64);
  check("TiedBottleneckBlock", block, 60, random_tensor({2, 4, 5, 5}, 61));
  SharedStage stage("stage", 2, 4, 2, DType::f64);
  check("SharedStage", stage, 80, random_tensor({2, 4, 5, 5}, 81));
  return o;
}

// --- 6 ----------------------------------------------------------------------

Tensor transposed_copy(const ParamPtr& p) { return transpose(p->value).contiguous(); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.values();
  const auto y = b.values();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

// Tied grad vs grad(first use) + transpose(grad(second use)).
double tied_grad_gap(const ParamPtr& tied, const ParamPtr& first, const ParamPtr& second) {
  return max_abs_diff(tied->grad, add(first->grad, transpose(second->grad)));
}

struct EquivalenceTally {
  bool forward_exact = true;
  double worst_backward = 0.0;
};

// Runs both modules under one probe loss; returns whether forwards agree.
bool run_pair(Module& tied, Module& untied, const Tensor& x, std::uint64_t seed) {
  Tape tape;
  const Tensor yt = tied.forward(x);
  tape.backward(probe(yt, seed));
  Tape tape2;
  const Tensor yu = untied.forward(x);
  tape2.backward(probe(yu, seed));
  return yt.values() == yu.values();
}

void copy_norms(BatchNorm2dLayer& from, BatchNorm2dLayer& to) {
  to.gamma->value.copy_from(from.gamma->value);
  to.beta->value.copy_from(from.beta->value);
}

Outcome untied_equivalence() {
  Outcome o;
  EquivalenceTally mha, ffn, block, stage;
  for (int s = 0; s < kEquivalenceSeeds; ++s) {
    const std::uint64_t seed = 1000 + 37 * static_cast<std::uint64_t>(s);
    {
      TiedMhaLayer t("t", 8, 2, true, true, DType::f64);
      randomize(t, seed);
      MhaLayer u("u", 8, 2, true, true, DType::f64);
      u.W_q->value.copy_from(t.W_q->value);
      u.W_k->value.copy_from(t.W_kv->value);
      u.W_v->value.copy_from(transposed_copy(t.W_kv));
      u.W_proj->value.copy_from(transposed_copy(t.W_q));
      u.b_q->value.copy_from(t.b_q->value);
      u.b_k->value.copy_from(t.b_k->value);
      u.b_v->value.copy_from(t.b_v->value);
      u.b_proj->value.copy_from(t.b_proj->value);
      mha.forward_exact &= run_pair(t, u, random_tensor({2, 3, 8}, seed + 1), seed + 2);
      mha.worst_backward = std::max({mha.worst_backward, tied_grad_gap(t.W_q, u.W_q, u.W_proj),
                                     tied_grad_gap(t.W_kv, u.W_k, u.W_v)});
    }
    {
      TiedFfnLayer t("t", 3, 5, Activation::gelu, DType::f64);
      randomize(t, seed);
      FfnLayer u("u", 3, 5, Activation::gelu, DType::f64);
      u.W_1->value.copy_from(t.W->value);
      u.W_2->value.copy_from(transposed_copy(t.W));
      u.b_1->value.copy_from(t.b_1->value);
      u.b_2->value.copy_from(t.b_2->value);
      ffn.forward_exact &= run_pair(t, u, random_tensor({2, 4, 3}, seed + 1), seed + 2);
      ffn.worst_backward = std::max(ffn.worst_backward, tied_grad_gap(t.W, u.W_1, u.W_2));
    }
    {
      TiedBottleneckBlock t("t", 4, 2, 4, 1, nullptr, DType::f64);
      randomize(t, seed);
      BottleneckBlock u("u", 4, 2, 4, 1, false, DType::f64);
      u.W_reduce->value.copy_from(t.W->value);
      u.W_expand->value.copy_from(transposed_copy(t.W));
      u.W_conv3->value.copy_from(t.W_conv3->value);
      copy_norms(t.bn1, u.bn1);
      copy_norms(t.bn2, u.bn2);
      copy_norms(t.bn3, u.bn3);
      block.forward_exact &= run_pair(t, u, random_tensor({2, 4, 5, 5}, seed + 1), seed + 2);
      block.worst_backward =
          std::max(block.worst_backward, tied_grad_gap(t.W, u.W_reduce, u.W_expand));
    }
    {
      // Two blocks sharing W vs two untied blocks: the shared grad is the sum
      // over blocks of grad(reduce) + transpose(grad(expand)).
      SharedStage t("t", 2, 4, 2, DType::f64);
      randomize(t, seed);
      struct Chain : Module {
        std::vector<std::unique_ptr<BottleneckBlock>> blocks;
        Tensor forward(const Tensor& x) override {
          Tensor h = x;
          for (auto& b : blocks) h = b->forward(h);
          return h;
        }
        std::vector<ParamPtr> parameters() const override { return {}; }
        std::int64_t macs(const Shape&) const override { return 0; }
      } u;
      for (int i = 0; i < 2; ++i) {
        auto b = std::make_unique<BottleneckBlock>("u" + std::to_string(i), 4, 2, 4, 1, false,
                                                   DType::f64);
        b->W_reduce->value.copy_from(t.W->value);
        b->W_expand->value.copy_from(transposed_copy(t.W));
        b->W_conv3->value.copy_from(t.blocks[i]->W_conv3->value);
        copy_norms(t.blocks[i]->bn1, b->bn1);
        copy_norms(t.blocks[i]->bn2, b->bn2);
        copy_norms(t.blocks[i]->bn3, b->bn3);
        u.blocks.push_back(std::move(b));
      }
      stage.forward_exact &= run_pair(t, u, random_tensor({2, 4, 5, 5}, seed + 1), seed + 2);
      Tensor want = add(u.blocks[0]->W_reduce->grad, transpose(u.blocks[0]->W_expand->grad));
      want = add(want, add(u.blocks[1]->W_reduce->grad, transpose(u.blocks[1]->W_expand->grad)));
      stage.worst_backward = std::max(stage.worst_backward, max_abs_diff(t.W->grad, want));
    }
  }
  for (auto [name, tally] : {std::pair{"TiedMhaLayer", mha}, {"TiedFfnLayer", ffn},
                             {"TiedBottleneckBlock", block}, {"SharedStage", stage}}) {
    o.require(tally.forward_exact && tally.worst_backward <= kBackwardTol,
              fmt("%s fwd %s, bwd %.1e", name, tally.forward_exact ? "exact" : "DIFFERS",
                  tally.worst_backward));
  }
  o.detail = fmt("%d seeds: ", kEquivalenceSeeds) + o.detail;
  return o;
}

// --- 7 ----------------------------------------------------------------------

struct TrainResult {
  EvalResult final;
  std::int64_t steps = 0;
};

// Desk-scale recipe: AdamW, lr 1e-3 with cosine decay, batch 32, 64 samples
// per class, identical seeds for model, data and batch order.
TrainResult train_tiny(const char* config, std::int64_t steps) {
  const auto cfg = load_config(config_path(config));
  auto model = build_model(cfg, 0);
  const auto data = gen_synthetic(cfg.num_classes, 64, cfg.image_size, 0);
  TrainState state;
  state.opt.kind = OptimizerKind::adamw;
  state.opt.lr = 1e-3;
  state.opt.weight_decay = 0.01;
  state.opt.schedule = ScheduleKind::cosine;
  state.opt.total_steps = steps;
  train(*model, data, state, {steps, 32, nullptr});
  return {evaluate(*model, data), state.step};
}

Outcome learnability() {
  Outcome o;
  constexpr std::int64_t steps = 300;
  static_assert(steps <= kMaxTrainSteps);
  const auto pe = train_tiny("tiny-vit-pe.json", steps);
  const auto base = train_tiny("tiny-vit.json", steps);
  o.require(pe.final.accuracy >= kMinTrainAccuracy,
            fmt("vit-pe train acc %.4f after %lld steps", pe.final.accuracy,
                static_cast<long long>(pe.steps)));
  const double ratio = pe.final.loss / base.final.loss;
  o.require(ratio <= kMaxLossRatio, fmt("loss %.4e vs baseline %.4e (ratio %.3f)",
                                        pe.final.loss, base.final.loss, ratio));
  return o;
}

// --- 8 ----------------------------------------------------------------------

Outcome persistence() {
  Outcome o;
  const std::string path =
      (std::filesystem::temp_directory_path() / "tiednet_acceptance.peck").string();
  for (const char* text :
       {R"({"family":"vit","variant":"pe","dim":16,"depth":2,"heads":2,"patch":4,"image_size":8,"num_classes":3})",
        R"({"family":"vit","variant":"pe","dim":16,"depth":2,"heads":2,"patch":4,"image_size":8,"num_classes":3,"dtype":"f64"})",
        R"({"family":"resnet","variant":"pe","base_width":4,"image_size":32,"num_classes":3})"}) {
    const auto cfg = parse_config(text);
    auto model = build_model(cfg, 5);
    TrainState state;
    state.opt.kind = OptimizerKind::adamw;
    state.seed = 5;
    train(*model, gen_synthetic(cfg.num_classes, 4, cfg.image_size, 5, cfg.dtype), state,
          {2, 6, nullptr});
    save_checkpoint(*model, &state, path);
    const auto loaded = load_checkpoint(path);

    bool bitwise = loaded.model->parameters().size() == model->parameters().size();
    for (std::size_t i = 0; bitwise && i < model->parameters().size(); ++i) {
      const auto& a = model->parameters()[i];
      const auto& b = loaded.model->parameters()[i];
      bitwise = a->name == b->name && a->value.dtype() == b->value.dtype() &&
                a->value.values() == b->value.values();
    }
    for (const auto& [k, v] : state.slots) {
      bitwise = bitwise && loaded.state && loaded.state->slots.count(k) &&
                loaded.state->slots.at(k).values() == v.values();
    }

    const auto raw = parse_checkpoint(read_file(path));
    // Tied roles never own a record: no second attention/FFN matrix, and in
    // resnet only the conventional first block of a stage has an expand W.
    std::size_t model_records = 0;
    bool no_second_copies = true;
    for (const auto& r : raw.records) {
      if (r.name.rfind("optim/", 0) == 0 || r.name.rfind("train/", 0) == 0) continue;
      ++model_records;
      for (const char* role : {"W_2", "W_v", "W_proj"}) {
        if (r.name.find(role) != std::string::npos) no_second_copies = false;
      }
      if (r.name.ends_with(".expand.W") && !r.name.ends_with(".0.expand.W")) {
        no_second_copies = false;
      }
    }
    const bool once = model_records == model->parameters().size() && no_second_copies;

    bool tied = true;
    if (cfg.is_vit()) {
      auto& vit = dynamic_cast<VitModel&>(*loaded.model);
      for (const auto& layer : vit.encoder) {
        auto* attn = dynamic_cast<TiedMhaLayer*>(layer->attn.get());
        auto* f = dynamic_cast<TiedFfnLayer*>(layer->ffn.get());
        tied = tied && attn->projection_weight().storage_id() == attn->W_q->value.storage_id() &&
               attn->value_weight().storage_id() == attn->W_kv->value.storage_id() &&
               f->second_weight().storage_id() == f->W->value.storage_id();
      }
    } else {
      auto& net = dynamic_cast<ResNetModel&>(*loaded.model);
      for (const auto& st : net.stages) {
        for (const auto& b : st.shared->blocks) {
          tied = tied && b->W->value.storage_id() == st.shared->W->value.storage_id();
        }
      }
    }
    o.require(bitwise && once && tied,
              fmt("%s %s: bitwise %s, stored once %s, tying %s", cfg.family.c_str(),
                  cfg.dtype == DType::f32 ? "f32" : "f64", bitwise ? "yes" : "no",
                  once ? "yes" : "no", tied ? "yes" : "no"));
  }
  std::filesystem::remove(path);
  return o;
}

// --- 9 ----------------------------------------------------------------------

std::string run_cli(const std::string& args, int* code) {
  const std::string cmd = std::string(TIEDNET_CLI_PATH) + " " + args;
  std::string out;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("cannot start " + cmd);
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  *code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return out;
}

Outcome determinism() {
  Outcome o;
  const std::string ckpt =
      (std::filesystem::temp_directory_path() / "tiednet_acceptance_det.peck").string();
  const std::string train_args = "train --config " + config_path("tiny-vit-pe.json") +
                                 " --steps 40 --batch 16 --optimizer adamw --schedule cosine"
                                 " --lr 1e-3 --seed 9 --out " + ckpt;
  int c1 = 0, c2 = 0;
  const auto log1 = run_cli(train_args, &c1);
  const auto ckpt1 = read_file(ckpt);
  const auto log2 = run_cli(train_args, &c2);
  const auto ckpt2 = read_file(ckpt);
  std::filesystem::remove(ckpt);
  o.require(c1 == 0 && c2 == 0 && !log1.empty() && log1 == log2,
            fmt("train logs identical (%zu bytes)", log1.size()));
  o.require(ckpt1 == ckpt2, "checkpoints identical");

  for (const char* flags : {"", " --json"}) {
    const std::string args = "audit --config " + config_path("resnet50-pe.json") + flags;
    const auto a = run_cli(args, &c1);
    const auto b = run_cli(args, &c2);
    o.require(c1 == 0 && c2 == 0 && !a.empty() && a == b,
              fmt("audit%s output identical", flags));
  }
  return o;
}

const std::array<std::pair<const char*, Outcome (*)()>, 9> kCriteria{{
    {"layer-level parameter halving", layer_halving},
    {"vit parameter counts", vit_counts},
    {"mac invariance and totals", mac_invariance},
    {"resnet parameter counts", resnet_counts},
    {"finite-difference gradients", gradient_checks},
    {"untied-equivalence oracle", untied_equivalence},
    {"learnability", learnability},
    {"checkpoint persistence", persistence},
    {"determinism", determinism},
}};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) which.push_back(std::atoi(argv[i]));
  if (which.empty()) {
    for (int i = 1; i <= 9; ++i) which.push_back(i);
  }
  bool all = true;
  for (int n : which) {
    if (n < 1 || n > 9) {
      std::fprintf(stderr, "unknown criterion %d\n", n);
      return 2;
    }
    const auto [name, fn] = kCriteria[n - 1];
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = secs <= kBudgetSeconds[n];
    const bool pass = o.pass && in_budget;
    std::printf("criterion %d: %s  %s  (%s; %.2fs of %.0fs%s)\n", n, pass ? "PASS" : "FAIL",
                name, o.detail.c_str(), secs, kBudgetSeconds[n],
                in_budget ? "" : ", over budget");
    std::fflush(stdout);
    all = all && pass;
  }
  return all ? 0 : 1;
}
