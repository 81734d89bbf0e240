#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cakes {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised for malformed shapes, channel mismatches and other contract
/// violations detected at op construction time.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward or backward pass produces a non-finite value.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grads.
  std::function<void(Node& self)> backward;

  std::span<double> grad_buffer();
};

}  // namespace detail

/// Shared handle to a dense row-major array of doubles with an optional
/// gradient. Copies alias the same storage; use clone() for a deep copy.
/// Operations on tensors that require gradients record a backward rule, and
/// backward() on a scalar result runs reverse-mode differentiation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> values() const;
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double operator[](std::size_t flat) const { return values()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Zero-length span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Seeds d(this)/d(this) = 1 and propagates to every reachable leaf.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Used by op implementations.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);
  detail::Node& node() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Thread-local switch; while disabled, ops record no backward graph.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Worker count for batch-parallel kernels. 1 is the determinism reference;
/// other values produce bitwise-identical results because every kernel
/// reduces per-sample partials in a fixed order.
void set_num_threads(std::size_t threads);
std::size_t num_threads();

// Runs body(i) for i in [0, count) across num_threads() workers.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace cakes
