#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include "tiednet/data.hpp"
#include "tiednet/model.hpp"
#include "tiednet/optim.hpp"

namespace tiednet {

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  double loss = 0.0;
  double accuracy = 0.0;  // on the step's batch
  double lr = 0.0;
};

struct TrainOptions {
  std::int64_t steps = 100;
  std::int64_t batch = 32;
  std::ostream* log = nullptr;  // one fixed-format line per step when set
};

// Runs `opts.steps` iterations of forward, cross-entropy, backward, optimizer
// step, zero-grad, continuing from `state.step`. Batches walk a per-epoch
// permutation seeded from state.seed, so a run is a pure function of the
// model, the data and the state. Throws NumericError naming the step when the
// loss is not finite.
std::vector<StepRecord> train(Model& model, const SyntheticDataset& data,
                              TrainState& state, const TrainOptions& opts);

// Sample indices for 0-based step `step`.
std::vector<std::int64_t> batch_indices(std::int64_t dataset_size,
                                        std::int64_t batch, std::int64_t step,
                                        std::uint64_t seed);

std::string format_step(const StepRecord& r);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mean loss and accuracy over the whole dataset, eval mode, no tape.
EvalResult evaluate(Model& model, const SyntheticDataset& data,
                    std::int64_t batch = 64);

// Row-wise argmax; exact ties resolve to the lowest class index.
std::vector<std::int64_t> argmax_rows(const Tensor& logits);

}  // namespace tiednet
