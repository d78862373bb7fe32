#include "azgan/random.hpp"

namespace azgan {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  Tensor t(std::move(shape), 0.0, requires_grad);
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace azgan
