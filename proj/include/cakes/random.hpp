#pragma once

#include <cstdint>
#include <random>

#include "cakes/tensor.hpp"

namespace cakes {

using Rng = std::mt19937_64;

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

// Derives an independent stream from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace cakes
