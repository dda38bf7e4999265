#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tiednet/tensor.hpp"

namespace tiednet {

// Class-conditional images: each class has a fixed random pattern, every
// sample is pattern * signal + unit Gaussian noise.
struct SyntheticDataset {
  Tensor samples;  // [N x 3 x image x image]
  std::vector<std::int64_t> labels;
  std::int64_t num_classes = 0;
  std::uint64_t seed = 0;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  // Gathers the given sample indices into a new batch tensor.
  Tensor gather(std::span<const std::int64_t> indices) const;
  std::vector<std::int64_t> gather_labels(
      std::span<const std::int64_t> indices) const;
};

inline constexpr double kSyntheticSignal = 0.5;

// Labels cycle 0, 1, ..., C-1, so every class has exactly n_per_class samples.
SyntheticDataset gen_synthetic(std::int64_t num_classes,
                               std::int64_t n_per_class, std::int64_t image,
                               std::uint64_t seed, DType dtype = DType::f32);

}  // namespace tiednet
