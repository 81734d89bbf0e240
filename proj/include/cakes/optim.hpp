#pragma once

#include <cstddef>
#include <vector>

#include "cakes/tensor.hpp"

namespace cakes {

struct SgdSettings {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  double power = 0.9;  // polynomial decay exponent
};

struct OptimizerState {
  SgdSettings settings;
  std::vector<std::vector<double>> velocity;
  std::size_t step = 0;
  std::size_t total_steps = 0;
};

/// SGD with momentum, L2 weight decay folded into the gradient, and the
/// schedule lr(t) = lr0 * (1 - t / T)^power.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, SgdSettings settings, std::size_t total_steps);

  double learning_rate() const { return learning_rate_at(state_.step); }
  double learning_rate_at(std::size_t step) const;

  // v <- m v + (g + wd p); p <- p - lr(t) v. Throws NumericalError on a
  // non-finite gradient before touching any parameter.
  void step();
  void zero_grad();

  const OptimizerState& state() const { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerState state_;
};

}  // namespace cakes
