#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cakes/tensor.hpp"

namespace cakes {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
};

using ScalarClosure = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `fn` against central differences with
/// step h over every coordinate of every input. The per-coordinate error is
/// |analytic - numeric| / (max(|analytic|, |numeric|) + 1e-3 * scale), where
/// scale is the largest gradient magnitude seen; the floor keeps roundoff on
/// near-zero coordinates from dominating.
GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor> inputs, double h = 1e-5,
                           double tol = 1e-4);

struct GradSuiteResult {
  std::string op;
  std::size_t cases = 0;
  double worst_error = 0.0;
  bool passed = false;
};

/// Finite-difference suite over every differentiable op in the engine, each
/// exercised on `cases` random draws.
std::vector<GradSuiteResult> run_gradient_suite(std::size_t cases = 20, std::uint64_t seed = 2024,
                                                double h = 1e-5, double tol = 1e-4);

}  // namespace cakes
