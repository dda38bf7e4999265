#include <cmath>
#include <random>
#include <string_view>

#include "tiednet/model.hpp"

namespace tiednet {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.substr(s.size() - suffix.size()) == suffix;
}

void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev,
                 bool truncate) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(static_cast<std::size_t>(t.numel()));
  for (auto& v : values) {
    do {
      v = dist(rng);
    } while (truncate && std::abs(v) > 2.0 * stddev);
  }
  t.copy_from(Tensor::from_values(t.dims(), values, t.dtype()));
}

}  // namespace

void init_weights(Model& model, std::uint64_t seed) {
  const bool resnet = !model.config().is_vit();
  for (const auto& p : model.parameters()) {
    const std::string& name = p->name;
    Tensor& v = p->value;
    p->zero_grad();
    if (ends_with(name, ".gamma") || ends_with(name, ".running_var")) {
      v.fill(1.0);
      continue;
    }
    if (ends_with(name, ".cls_token") || ends_with(name, ".pos_embed")) {
      std::mt19937_64 rng(splitmix64(seed ^ fnv1a(name)));
      fill_normal(v, rng, 0.02, true);
      continue;
    }
    if (v.rank() == 1) {  // biases, shifts, running means
      v.fill(0.0);
      continue;
    }
    std::mt19937_64 rng(splitmix64(seed ^ fnv1a(name)));
    const bool classifier = name == "fc.W" || name == "head.W";
    if (v.rank() == 4 || (resnet && v.rank() == 2 && !classifier)) {
      std::int64_t fan_out = v.dim(0);
      for (int a = 2; a < v.rank(); ++a) fan_out *= v.dim(a);
      fill_normal(v, rng, std::sqrt(2.0 / static_cast<double>(fan_out)), false);
    } else {
      fill_normal(v, rng, 0.02, true);
    }
  }
}

}  // namespace tiednet
