#include "cakes/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace cakes {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<double> Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::size_t> g_threads{1};

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_num_threads(std::size_t threads) { g_threads = std::max<std::size_t>(1, threads); }
std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min(num_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next++; i < count; i = next++) body(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (values.size() != numel(shape))
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return node().value.size(); }

std::span<const double> Tensor::values() const { return node().value; }
std::span<double> Tensor::mutable_values() { return node().value; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("tensor: item() on " + shape_string(shape()));
  return node().value[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }
void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }
bool Tensor::has_grad() const { return !node().grad.empty(); }
std::span<const double> Tensor::grad() const { return node().grad; }
std::span<double> Tensor::mutable_grad() { return node().grad_buffer(); }
void Tensor::zero_grad() { node().grad.clear(); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto& n = *out.node_;
  n.requires_grad = true;
  n.parents.reserve(parents.size());
  for (auto& p : parents) n.parents.push_back(p.node_);
  n.backward = std::move(backward);
  return out;
}

void Tensor::backward() const {
  auto& root = node();
  if (root.value.size() != 1) throw ShapeError("backward: root must be a scalar");
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (auto* n : order) {
    if (!n->parents.empty()) continue;  // leaves only
    for (double g : n->grad)
      if (!std::isfinite(g)) throw NumericalError("backward: non-finite gradient at a leaf");
  }
}

Tensor Tensor::detach() const { return Tensor(shape(), node().value); }

Tensor Tensor::clone() const {
  Tensor t(shape(), node().value, requires_grad());
  return t;
}

Tensor Tensor::reshape(Shape new_shape) const {
  if (numel(new_shape) != size())
    throw ShapeError("reshape: " + shape_string(shape()) + " -> " + shape_string(new_shape));
  return make_result(std::move(new_shape), node().value, {*this}, [](detail::Node& self) {
    auto dst = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i];
  });
}

}  // namespace cakes
