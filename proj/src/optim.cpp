#include "cakes/optim.hpp"

#include <cmath>
#include <string>

namespace cakes {

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, SgdSettings settings,
                           std::size_t total_steps)
    : params_(std::move(params)) {
  if (!(settings.learning_rate > 0.0)) throw std::invalid_argument("sgd: learning rate must be positive");
  if (settings.momentum < 0.0 || settings.momentum >= 1.0)
    throw std::invalid_argument("sgd: momentum must lie in [0, 1)");
  if (settings.weight_decay < 0.0) throw std::invalid_argument("sgd: weight decay must be non-negative");
  state_.settings = settings;
  state_.total_steps = total_steps;
  state_.velocity.reserve(params_.size());
  for (const auto& p : params_) state_.velocity.emplace_back(p.size(), 0.0);
}

double SgdOptimizer::learning_rate_at(std::size_t step) const {
  if (state_.total_steps == 0) return state_.settings.learning_rate;
  if (step >= state_.total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(state_.total_steps);
  return state_.settings.learning_rate * std::pow(1.0 - frac, state_.settings.power);
}

void SgdOptimizer::step() {
  if (state_.step >= state_.total_steps && state_.total_steps > 0)
    throw std::logic_error("sgd: step beyond the schedule horizon");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (double g : params_[k].grad())
      if (!std::isfinite(g))
        throw NumericalError("sgd: non-finite gradient in parameter " + std::to_string(k) +
                             " at step " + std::to_string(state_.step));
  }
  const double lr = learning_rate();
  const auto& s = state_.settings;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto values = p.mutable_values();
    auto grad = p.grad();
    auto& v = state_.velocity[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = (grad.empty() ? 0.0 : grad[i]) + s.weight_decay * values[i];
      v[i] = s.momentum * v[i] + g;
      values[i] -= lr * v[i];
    }
  }
  ++state_.step;
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace cakes
