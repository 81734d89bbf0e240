#include "cakes/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cakes/ops.hpp"
#include "cakes/random.hpp"

namespace cakes {

GradCheckReport grad_check(const ScalarClosure& fn, std::vector<Tensor> inputs, double h,
                           double tol) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  fn(inputs).backward();

  std::vector<std::vector<double>> analytic, numeric;
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(t.size(), 0.0);
  }
  {
    NoGradGuard guard;
    for (auto& t : inputs) {
      std::vector<double> n(t.size());
      auto v = t.mutable_values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double orig = v[i];
        v[i] = orig + h;
        const double fp = fn(inputs).item();
        v[i] = orig - h;
        const double fm = fn(inputs).item();
        v[i] = orig;
        n[i] = (fp - fm) / (2.0 * h);
      }
      numeric.push_back(std::move(n));
    }
  }

  double scale_ = 0.0;
  std::size_t coords = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < analytic[k].size(); ++i) {
      scale_ = std::max({scale_, std::abs(analytic[k][i]), std::abs(numeric[k][i])});
      ++coords;
    }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < analytic[k].size(); ++i) {
      const double a = analytic[k][i], n = numeric[k][i];
      const double denom = std::max(std::abs(a), std::abs(n)) + 1e-3 * scale_ + 1e-300;
      worst = std::max(worst, std::abs(a - n) / denom);
    }
  for (auto& t : inputs) t.zero_grad();
  return {worst, coords, worst < tol};
}

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Values bounded away from zero so kinks (relu, |.|) stay outside +-h.
Tensor away_from_zero(Shape shape, Rng& rng) {
  auto t = uniform_tensor(std::move(shape), 0.1, 1.0, rng);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.mutable_values())
    if (sign(rng)) v = -v;
  return t;
}

// Contract an arbitrary output against a fixed random tensor.
Tensor project(const Tensor& out, const Tensor& r) { return sum(mul(out, r)); }

struct Case {
  ScalarClosure fn;
  std::vector<Tensor> inputs;
};

using CaseMaker = std::function<Case(Rng&)>;

std::vector<std::pair<std::string, CaseMaker>> suite_cases() {
  std::vector<std::pair<std::string, CaseMaker>> cases;

  cases.emplace_back("conv3d", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
    const std::size_t d = pick(rng, 3, 5), h = pick(rng, 3, 5), w = pick(rng, 3, 5);
    auto odd = [&](std::size_t cap) { return pick(rng, 0, cap >= 5 ? 2 : 1) * 2 + 1; };
    const std::size_t kd = odd(d), kh = odd(h), kw = odd(w);
    ConvOptions opt;
    opt.stride = {pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 2)};
    auto x = normal_tensor({n, ci, d, h, w}, 1.0, rng);
    auto wt = normal_tensor({co, ci, kd, kh, kw}, 0.5, rng);
    auto probe = conv3d(x, wt, opt);
    auto r = normal_tensor(probe.shape(), 1.0, rng);
    return Case{[opt, r](const std::vector<Tensor>& in) { return project(conv3d(in[0], in[1], opt), r); },
                {x, wt}};
  });

  cases.emplace_back("batch_norm_train", [](Rng& rng) {
    const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3);
    auto x = normal_tensor({n, c, 2, 2, pick(rng, 1, 3)}, 1.5, rng);
    auto gamma = normal_tensor({c}, 1.0, rng);
    auto beta = normal_tensor({c}, 1.0, rng);
    auto r = normal_tensor(x.shape(), 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) {
                  return project(batch_norm(in[0], in[1], in[2], nullptr, NormMode::Train), r);
                },
                {x, gamma, beta}};
  });

  cases.emplace_back("batch_norm_eval", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3);
    auto x = normal_tensor({n, c, 3, 2}, 1.0, rng);
    auto gamma = normal_tensor({c}, 1.0, rng);
    auto beta = normal_tensor({c}, 1.0, rng);
    auto stats = std::make_shared<NormStats>(c);
    for (std::size_t i = 0; i < c; ++i) {
      stats->running_mean[i] = std::normal_distribution<double>(0.0, 1.0)(rng);
      stats->running_var[i] = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    }
    auto r = normal_tensor(x.shape(), 1.0, rng);
    return Case{[r, stats](const std::vector<Tensor>& in) {
                  return project(batch_norm(in[0], in[1], in[2], stats.get(), NormMode::Eval), r);
                },
                {x, gamma, beta}};
  });

  cases.emplace_back("relu", [](Rng& rng) {
    auto x = away_from_zero({pick(rng, 1, 3), pick(rng, 2, 4), 3}, rng);
    auto r = normal_tensor(x.shape(), 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) { return project(relu(in[0]), r); }, {x}};
  });

  cases.emplace_back("global_avg_pool", [](Rng& rng) {
    auto x = normal_tensor({pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3), 2, 2}, 1.0, rng);
    auto r = normal_tensor({x.dim(0), x.dim(1)}, 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) { return project(global_avg_pool(in[0]), r); }, {x}};
  });

  cases.emplace_back("linear", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), f = pick(rng, 1, 5), o = pick(rng, 1, 4);
    auto x = normal_tensor({n, f}, 1.0, rng);
    auto w = normal_tensor({o, f}, 1.0, rng);
    auto b = normal_tensor({o}, 1.0, rng);
    auto r = normal_tensor({n, o}, 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) { return project(linear(in[0], in[1], in[2]), r); },
                {x, w, b}};
  });

  cases.emplace_back("softmax", [](Rng& rng) {
    auto x = normal_tensor({pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 1, 4)}, 1.0, rng);
    auto r = normal_tensor(x.shape(), 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) { return project(softmax(in[0]), r); }, {x}};
  });

  cases.emplace_back("softmax_cross_entropy", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 5);
    const bool dense = pick(rng, 0, 1) == 1;
    Shape s = dense ? Shape{n, k, 2, pick(rng, 1, 3), 2} : Shape{n, k};
    auto x = normal_tensor(s, 2.0, rng);
    std::vector<int> labels(x.size() / k);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
    return Case{[labels](const std::vector<Tensor>& in) { return softmax_cross_entropy(in[0], labels); },
                {x}};
  });

  cases.emplace_back("dice_loss", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), k = pick(rng, 2, 3);
    auto p = uniform_tensor({n, k, 2, 2, pick(rng, 2, 3)}, 0.05, 0.95, rng);
    std::vector<int> labels(p.size() / k);
    for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
    return Case{[labels](const std::vector<Tensor>& in) { return dice_loss(in[0], labels); }, {p}};
  });

  cases.emplace_back("channel_ops", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 4);
    auto x = normal_tensor({n, c, 2, 3}, 1.0, rng);
    auto a = normal_tensor({c}, 1.0, rng);
    auto b = normal_tensor({c}, 1.0, rng);
    auto r = normal_tensor(x.shape(), 1.0, rng);
    return Case{[r](const std::vector<Tensor>& in) {
                  return project(add_channel_bias(channel_scale(in[0], in[1]), in[2]), r);
                },
                {x, a, b}};
  });

  cases.emplace_back("gather_assemble", [](Rng& rng) {
    const std::size_t rows = pick(rng, 2, 5), ci = pick(rng, 1, 2);
    auto src = normal_tensor({rows, ci, 1, 1, 1}, 1.0, rng);
    std::vector<std::size_t> perm(rows);
    for (std::size_t i = 0; i < rows; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t split = pick(rng, 1, rows - 1);
    std::vector<std::size_t> first(perm.begin(), perm.begin() + static_cast<long>(split));
    std::vector<std::size_t> second(perm.begin() + static_cast<long>(split), perm.end());
    auto x = normal_tensor({2, ci, 2, 2, 2}, 1.0, rng);
    auto r = normal_tensor({2, rows, 2, 2, 2}, 1.0, rng);
    return Case{[=](const std::vector<Tensor>& in) {
                  auto a = conv3d(in[1], gather_rows(in[0], first));
                  auto b = conv3d(in[1], gather_rows(in[0], second));
                  return project(assemble_channels({a, b}, {first, second}, rows), r);
                },
                {src, x}};
  });

  cases.emplace_back("weighted_abs_sum", [](Rng& rng) {
    auto x = away_from_zero({pick(rng, 2, 8)}, rng);
    std::vector<double> w(x.size());
    for (auto& v : w) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return Case{[w](const std::vector<Tensor>& in) { return weighted_abs_sum(in[0], w); }, {x}};
  });

  cases.emplace_back("elementwise", [](Rng& rng) {
    Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
    auto a = normal_tensor(s, 1.0, rng);
    auto b = normal_tensor(s, 1.0, rng);
    const double f = std::normal_distribution<double>(0.0, 2.0)(rng);
    return Case{[f](const std::vector<Tensor>& in) {
                  auto y = add(mul(in[0], in[1]), scale(sub(in[0], in[1]), f));
                  return mean(mul(y, y).reshape({y.size()}));
                },
                {a, b}};
  });

  cases.emplace_back("conv_relu_mean", [](Rng& rng) {
    const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3);
    auto x = normal_tensor({2, ci, 4, 4, 4}, 1.0, rng);
    auto w = normal_tensor({co, ci, 3, 3, 3}, 0.3, rng);
    return Case{[](const std::vector<Tensor>& in) { return mean(relu(conv3d(in[0], in[1]))); }, {x, w}};
  });

  return cases;
}

}  // namespace

std::vector<GradSuiteResult> run_gradient_suite(std::size_t cases, std::uint64_t seed, double h,
                                                double tol) {
  std::vector<GradSuiteResult> results;
  std::uint64_t tag = 0;
  for (const auto& [name, make] : suite_cases()) {
    GradSuiteResult r{name, cases, 0.0, true};
    for (std::size_t i = 0; i < cases; ++i) {
      Rng rng(derive_seed(seed, tag * 1000 + i));
      Case c = make(rng);
      const auto rep = grad_check(c.fn, c.inputs, h, tol);
      r.worst_error = std::max(r.worst_error, rep.max_relative_error);
      r.passed = r.passed && rep.passed;
    }
    ++tag;
    results.push_back(r);
  }
  return results;
}

}  // namespace cakes
