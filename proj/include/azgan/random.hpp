#pragma once

#include "azgan/tensor.hpp"

#include <cstdint>
#include <random>

namespace azgan {

using Rng = std::mt19937_64;

/// Mixes a parent seed with a stream tag into an independent child seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

}  // namespace azgan
