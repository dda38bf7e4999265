#include "tiednet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "tiednet/error.hpp"

namespace tiednet {

namespace {

std::vector<std::int64_t> epoch_permutation(std::int64_t n, std::int64_t epoch,
                                            std::uint64_t seed) {
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(epoch));
  // Fisher-Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

double batch_accuracy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  const auto pred = argmax_rows(logits);
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

std::vector<std::int64_t> batch_indices(std::int64_t n, std::int64_t batch,
                                        std::int64_t step, std::uint64_t seed) {
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(batch));
  std::int64_t cached_epoch = -1;
  std::vector<std::int64_t> perm;
  for (std::int64_t i = 0; i < batch; ++i) {
    const std::int64_t pos = step * batch + i;
    const std::int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(n, epoch, seed);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(pos % n)]);
  }
  return out;
}

std::vector<std::int64_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw RankError("argmax_rows: logits must be rank 2");
  const auto rows = logits.dim(0), cols = logits.dim(1);
  const auto v = logits.values();
  std::vector<std::int64_t> out;
  for (std::int64_t r = 0; r < rows; ++r) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < cols; ++c) {
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

std::string format_step(const StepRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "step %6lld  loss %.9e  acc %.4f  lr %.6e",
                static_cast<long long>(r.step), r.loss, r.accuracy, r.lr);
  return buf;
}

std::vector<StepRecord> train(Model& model, const SyntheticDataset& data,
                              TrainState& state, const TrainOptions& opts) {
  if (opts.batch < 1 || opts.steps < 0) {
    throw ValidationError("batch", "batch must be >= 1 and steps >= 0");
  }
  const auto params = model.trainable_parameters();
  model.set_mode(NormMode::train);
  model.zero_grad();
  std::vector<StepRecord> records;
  for (std::int64_t k = 0; k < opts.steps; ++k) {
    const std::int64_t step = state.step;
    const auto idx = batch_indices(data.size(), opts.batch, step, state.seed);
    const Tensor images = data.gather(idx).to(model.config().dtype);
    const auto labels = data.gather_labels(idx);

    StepRecord rec;
    rec.step = step + 1;
    rec.lr = scheduled_lr(state.opt, step);
    {
      Tape tape;
      const Tensor logits = model.forward(images);
      const Tensor loss = cross_entropy(logits, labels);
      rec.loss = loss.item();
      if (!std::isfinite(rec.loss)) {
        throw NumericError("non-finite loss " + std::to_string(rec.loss) +
                           " at step " + std::to_string(rec.step));
      }
      rec.accuracy = batch_accuracy(logits, labels);
      tape.backward(loss);
    }
    optimizer_step(params, state);
    model.zero_grad();
    if (opts.log) *opts.log << format_step(rec) << "\n";
    records.push_back(rec);
  }
  return records;
}

EvalResult evaluate(Model& model, const SyntheticDataset& data,
                    std::int64_t batch) {
  NoGradGuard no_grad;
  model.set_mode(NormMode::eval);
  double loss_sum = 0.0;
  std::int64_t hits = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch) {
    const auto end = std::min(data.size(), start + batch);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = model.forward(data.gather(idx).to(model.config().dtype));
    const auto labels = data.gather_labels(idx);
    loss_sum += cross_entropy(logits, labels).item() * static_cast<double>(idx.size());
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  }
  model.set_mode(NormMode::train);
  const auto n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(hits) / n};
}

}  // namespace tiednet
