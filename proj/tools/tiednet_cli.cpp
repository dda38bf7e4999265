// Command-line front end: audit, compare, gradcheck, train, eval.
//
// Exit codes: 0 success, 1 validation failure (bad config, failed check,
// unreadable file, ...), 2 usage error.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "tiednet/audit.hpp"
#include "tiednet/checkpoint.hpp"
#include "tiednet/data.hpp"
#include "tiednet/error.hpp"
#include "tiednet/gradcheck.hpp"
#include "tiednet/model.hpp"
#include "tiednet/train.hpp"

namespace {

using namespace tiednet;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kUsage = 2;

struct AuditArgs {
  std::string config;
  std::int64_t resolution = 0;
  bool json = false;
};

struct CompareArgs {
  std::string config_a, config_b;
  std::int64_t resolution = 0;
  bool json = false;
};

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 0;
  double eps = 1e-4;
  double tol = 1e-6;
  std::int64_t coords = 8;
  std::int64_t batch = 2;
};

struct TrainArgs {
  std::string config;
  std::int64_t steps = 100;
  std::int64_t batch = 32;
  std::string optimizer = "adamw";
  std::string schedule = "constant";
  double lr = 1e-3;
  double weight_decay = -1.0;
  std::uint64_t seed = 0;
  std::int64_t per_class = 64;
  std::string out;
};

struct EvalArgs {
  std::string config;
  std::string ckpt;
  std::int64_t per_class = 64;
};

std::int64_t resolution_for(const ModelConfig& cfg, std::int64_t requested) {
  return requested > 0 ? requested : cfg.image_size;
}

int run_audit(const AuditArgs& a) {
  const auto cfg = load_config(a.config);
  const auto model = build_layout(cfg);
  const auto report = audit_model(*model, resolution_for(cfg, a.resolution));
  std::cout << (a.json ? report_json(report) : report_text(report));
  return kOk;
}

int run_compare(const CompareArgs& a) {
  const auto cfg_a = load_config(a.config_a);
  const auto cfg_b = load_config(a.config_b);
  if (cfg_a.family != cfg_b.family) {
    std::cerr << "warning: comparing a " << cfg_a.family << " model with a "
              << cfg_b.family << " model\n";
  }
  const auto ra = audit_model(*build_layout(cfg_a), resolution_for(cfg_a, a.resolution));
  const auto rb = audit_model(*build_layout(cfg_b), resolution_for(cfg_b, a.resolution));
  std::cout << (a.json ? compare_json(ra, rb) : compare_text(ra, rb));
  return kOk;
}

int run_gradcheck(const GradcheckArgs& a) {
  auto cfg = load_config(a.config);
  cfg.dtype = DType::f64;
  auto model = build_model(cfg, a.seed);
  const auto data = gen_synthetic(cfg.num_classes, 1, cfg.image_size, a.seed, DType::f64);
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < a.batch; ++i) idx.push_back(i % data.size());
  const Tensor images = data.gather(idx);
  const auto labels = data.gather_labels(idx);
  auto loss = [&] { return cross_entropy(model->forward(images), labels); };

  GradCheckOptions opts;
  opts.eps = a.eps;
  opts.tol = a.tol;
  opts.max_coords = a.coords;
  opts.seed = a.seed;
  const auto report = grad_check(loss, model->trainable_parameters(), opts);
  std::cout << report.text();
  return report.passed ? kOk : kValidation;
}

int run_train(const TrainArgs& a) {
  const auto cfg = load_config(a.config);
  auto model = build_model(cfg, a.seed);
  const auto data = gen_synthetic(cfg.num_classes, a.per_class, cfg.image_size, a.seed);

  TrainState state;
  state.seed = a.seed;
  state.opt.kind = parse_optimizer(a.optimizer);
  state.opt.schedule = parse_schedule(a.schedule);
  state.opt.lr = a.lr;
  state.opt.total_steps = a.steps;
  if (a.weight_decay >= 0.0) {
    state.opt.weight_decay = a.weight_decay;
  } else {
    state.opt.weight_decay = state.opt.kind == OptimizerKind::adamw ? 0.01 : 0.0;
  }

  TrainOptions opts;
  opts.steps = a.steps;
  opts.batch = a.batch;
  opts.log = &std::cout;
  train(*model, data, state, opts);
  const auto result = evaluate(*model, data);
  std::printf("final  loss %.9e  train acc %.4f\n", result.loss, result.accuracy);
  if (!a.out.empty()) {
    save_checkpoint(*model, &state, a.out);
    std::printf("saved %s\n", a.out.c_str());
  }
  return kOk;
}

int run_eval(const EvalArgs& a) {
  const auto cfg = load_config(a.config);
  auto model = build_model(cfg, 0);
  const auto state = load_into(*model, a.ckpt);
  const std::uint64_t seed = state ? state->seed : 0;
  const auto data = gen_synthetic(cfg.num_classes, a.per_class, cfg.image_size, seed);
  const auto result = evaluate(*model, data);
  std::printf("eval  loss %.9e  acc %.4f  (step %lld)\n", result.loss,
              result.accuracy, static_cast<long long>(state ? state->step : 0));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transpose-tied ViT / ResNet toolkit"};
  app.require_subcommand(1);

  AuditArgs audit;
  auto* audit_cmd = app.add_subcommand("audit", "Parameter and MAC audit of a config");
  audit_cmd->add_option("--config", audit.config, "Model config JSON")->required();
  audit_cmd->add_option("--resolution", audit.resolution, "Input resolution (default: image_size)");
  audit_cmd->add_flag("--json", audit.json, "Emit the JSON report");

  CompareArgs compare;
  auto* compare_cmd = app.add_subcommand("compare", "Side-by-side audit of two configs");
  compare_cmd->add_option("--config-a", compare.config_a, "First config")->required();
  compare_cmd->add_option("--config-b", compare.config_b, "Second config")->required();
  compare_cmd->add_option("--resolution", compare.resolution, "Input resolution");
  compare_cmd->add_flag("--json", compare.json, "Emit JSON");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check (f64)");
  gc_cmd->add_option("--config", gc.config, "Model config JSON")->required();
  gc_cmd->add_option("--seed", gc.seed, "Seed");
  gc_cmd->add_option("--eps", gc.eps, "Central-difference step");
  gc_cmd->add_option("--tol", gc.tol, "Maximum relative error");
  gc_cmd->add_option("--coords", gc.coords, "Coordinates per parameter (0 = all)");
  gc_cmd->add_option("--batch", gc.batch, "Images in the probe batch");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic data");
  train_cmd->add_option("--config", tr.config, "Model config JSON")->required();
  train_cmd->add_option("--steps", tr.steps, "Optimizer steps");
  train_cmd->add_option("--batch", tr.batch, "Batch size");
  train_cmd->add_option("--optimizer", tr.optimizer, "sgd | adamw")
      ->check(CLI::IsMember({"sgd", "adamw"}));
  train_cmd->add_option("--schedule", tr.schedule, "constant | cosine")
      ->check(CLI::IsMember({"constant", "cosine"}));
  train_cmd->add_option("--lr", tr.lr, "Base learning rate");
  train_cmd->add_option("--weight-decay", tr.weight_decay,
                        "Weight decay (default 0.01 adamw, 0 sgd)");
  train_cmd->add_option("--seed", tr.seed, "Seed for init, data and batch order");
  train_cmd->add_option("--per-class", tr.per_class, "Synthetic samples per class");
  train_cmd->add_option("--out", tr.out, "Checkpoint path");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on synthetic data");
  eval_cmd->add_option("--config", ev.config, "Model config JSON")->required();
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--per-class", ev.per_class, "Synthetic samples per class");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*audit_cmd) return run_audit(audit);
    if (*compare_cmd) return run_compare(compare);
    if (*gc_cmd) return run_gradcheck(gc);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kUsage;
}
