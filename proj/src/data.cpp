#include "tiednet/data.hpp"

#include <random>

#include "tiednet/error.hpp"

namespace tiednet {

SyntheticDataset gen_synthetic(std::int64_t num_classes,
                               std::int64_t n_per_class, std::int64_t image,
                               std::uint64_t seed, DType dtype) {
  if (num_classes < 1 || n_per_class < 1 || image < 1) {
    throw ShapeError("gen_synthetic: classes, samples per class and image "
                     "size must all be >= 1");
  }
  const std::int64_t pixels = 3 * image * image;
  const std::int64_t n = num_classes * n_per_class;

  std::mt19937_64 pattern_rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> patterns(static_cast<std::size_t>(num_classes * pixels));
  for (auto& v : patterns) v = unit(pattern_rng);

  std::mt19937_64 noise_rng(seed ^ 0x6e6f697365ull);
  std::vector<double> values(static_cast<std::size_t>(n * pixels));
  SyntheticDataset ds;
  ds.num_classes = num_classes;
  ds.seed = seed;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t label = i % num_classes;
    ds.labels.push_back(label);
    const double* pattern = patterns.data() + label * pixels;
    double* out = values.data() + i * pixels;
    for (std::int64_t k = 0; k < pixels; ++k) {
      out[k] = kSyntheticSignal * pattern[k] + unit(noise_rng);
    }
  }
  ds.samples = Tensor::from_values({n, 3, image, image}, values, dtype);
  return ds;
}

Tensor SyntheticDataset::gather(std::span<const std::int64_t> indices) const {
  Shape dims = samples.dims();
  const std::int64_t per = samples.numel() / dims[0];
  dims[0] = static_cast<std::int64_t>(indices.size());
  Tensor out(dims, samples.dtype());
  dispatch(samples.dtype(), [&]<typename T>() {
    const T* src = samples.data<T>();
    T* dst = out.data<T>();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto i = indices[b];
      if (i < 0 || i >= size()) {
        throw IndexError("dataset index " + std::to_string(i) + " out of range");
      }
      std::copy(src + i * per, src + (i + 1) * per, dst + b * per);
    }
  });
  return out;
}

std::vector<std::int64_t> SyntheticDataset::gather_labels(
    std::span<const std::int64_t> indices) const {
  std::vector<std::int64_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace tiednet
