#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cakes/gradcheck.hpp"
#include "cakes/ops.hpp"
#include "cakes/optim.hpp"
#include "cakes/random.hpp"
#include "oracles.hpp"

using namespace cakes;

namespace {

Tensor vec5(std::vector<double> v, std::size_t w) { return Tensor({1, 1, 1, 1, w}, std::move(v)); }

}  // namespace

TEST(Conv3d, OneDimensionalCrossCorrelation) {
  auto y = conv3d(vec5({1, 2, 3}, 3), vec5({1, 0, -1}, 3));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1, 3}));
  EXPECT_DOUBLE_EQ(y[0], -2.0);
  EXPECT_DOUBLE_EQ(y[1], -2.0);
  EXPECT_DOUBLE_EQ(y[2], 2.0);
}

TEST(Conv3d, ZeroKernelGivesZeroOutput) {
  Rng rng(1);
  auto x = normal_tensor({2, 3, 4, 5, 3}, 1.0, rng);
  auto y = conv3d(x, Tensor({2, 3, 3, 1, 3}, 0.0));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv3d, UnitPointwiseKernelIsIdentity) {
  Rng rng(2);
  auto x = normal_tensor({1, 1, 3, 4, 5}, 1.0, rng);
  auto y = conv3d(x, Tensor({1, 1, 1, 1, 1}, 1.0));
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv3d, RejectsEvenKernelsAndChannelMismatch) {
  Tensor x({1, 2, 4, 4, 4}, 1.0);
  EXPECT_THROW(conv3d(x, Tensor({1, 2, 2, 3, 3}, 1.0)), ShapeError);
  EXPECT_THROW(conv3d(x, Tensor({1, 3, 3, 3, 3}, 1.0)), ShapeError);
}

TEST(Conv3d, MatchesDirectLoopOracle) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    const std::size_t kd = 2 * pick(0, 1) + 1, kh = 2 * pick(0, 2) + 1, kw = 2 * pick(0, 1) + 1;
    auto x = normal_tensor({pick(1, 2), pick(1, 3), pick(kd, 6), pick(kh, 6), pick(kw, 6)}, 1.0, rng);
    auto w = normal_tensor({pick(1, 4), x.dim(1), kd, kh, kw}, 1.0, rng);
    ConvOptions opt;
    opt.stride = {pick(1, 2), pick(1, 3), pick(1, 2)};
    auto y = conv3d(x, w, opt);
    auto ref = oracle::naive_conv3d(x, w, opt.stride);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12 * (1 + std::abs(ref[i])));
  }
}

TEST(Conv3d, OutputExtentFormula) {
  EXPECT_EQ(conv_output_extent(16, 3, 2, 1), 8u);
  EXPECT_EQ(conv_output_extent(5, 3, 1, 1), 5u);
  EXPECT_EQ(conv_output_extent(7, 5, 3, 0), 1u);
}

TEST(Conv3d, LinearInWeights) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    auto x = normal_tensor({2, 3, 5, 4, 6}, 1.0, rng);
    auto w1 = normal_tensor({4, 3, 3, 3, 3}, 1.0, rng);
    auto w2 = normal_tensor({4, 3, 3, 3, 3}, 1.0, rng);
    const double a = std::normal_distribution<double>(0, 2)(rng);
    const double b = std::normal_distribution<double>(0, 2)(rng);
    auto lhs = conv3d(x, add(scale(w1, a), scale(w2, b)));
    auto rhs = add(scale(conv3d(x, w1), a), scale(conv3d(x, w2), b));
    EXPECT_LT(oracle::max_relative_error(lhs, rhs), 1e-10);
  }
}

TEST(Conv3d, ThreadedMatchesSequentialBitwise) {
  Rng rng(7);
  auto x = normal_tensor({5, 3, 6, 5, 4}, 1.0, rng, true);
  auto w = normal_tensor({4, 3, 3, 1, 3}, 1.0, rng, true);
  auto r = normal_tensor({5, 4, 3, 5, 4}, 1.0, rng);
  ConvOptions opt;
  opt.stride = {2, 1, 1};
  auto run = [&](std::size_t threads) {
    set_num_threads(threads);
    x.zero_grad();
    w.zero_grad();
    auto y = conv3d(x, w, opt);
    sum(mul(y, r)).backward();
    std::vector<double> all(y.values().begin(), y.values().end());
    all.insert(all.end(), x.grad().begin(), x.grad().end());
    all.insert(all.end(), w.grad().begin(), w.grad().end());
    return all;
  };
  auto single = run(1);
  auto multi = run(3);
  set_num_threads(1);
  EXPECT_EQ(single, multi);
}

TEST(BatchNorm, IdentityAffineOnStandardizedInput) {
  Tensor x({2, 1, 2}, {1.0, -1.0, 1.0, -1.0});
  auto y = batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.0), nullptr, NormMode::Train, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-5);
}

TEST(BatchNorm, ZeroScaleGivesConstantShift) {
  Rng rng(3);
  auto x = normal_tensor({3, 2, 4}, 1.0, rng);
  auto y = batch_norm(x, Tensor({2}, {0.0, 1.0}), Tensor({2}, {0.7, 0.0}), nullptr, NormMode::Train);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y[(n * 2) * 4 + i], 0.7);
}

TEST(BatchNorm, DoublingScaleDoublesOutput) {
  Rng rng(4);
  auto x = normal_tensor({3, 2, 5}, 1.0, rng);
  Tensor zero({2}, 0.0);
  auto y1 = batch_norm(x, Tensor({2}, {0.3, -1.1}), zero, nullptr, NormMode::Train);
  auto y2 = batch_norm(x, Tensor({2}, {0.6, -2.2}), zero, nullptr, NormMode::Train);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y2[i], 2.0 * y1[i]);
}

TEST(BatchNorm, ConstantChannelStaysFinite) {
  Tensor x({2, 1, 3}, 5.0);
  auto y = batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.25), nullptr, NormMode::Train);
  for (double v : y.values()) EXPECT_EQ(v, 0.25);
}

TEST(BatchNorm, EvalUsesRunningStatistics) {
  NormStats stats(1);
  Tensor x({4, 1, 1}, {1.0, 3.0, 5.0, 7.0});
  stats.momentum = 1.0;
  batch_norm(x, Tensor({1}, 1.0), Tensor({1}, 0.0), &stats, NormMode::Train);
  EXPECT_DOUBLE_EQ(stats.running_mean[0], 4.0);
  EXPECT_DOUBLE_EQ(stats.running_var[0], 20.0 / 3.0);
  auto y = batch_norm(Tensor({1, 1, 1}, {4.0 + std::sqrt(20.0 / 3.0 + 1e-5)}), Tensor({1}, 2.0),
                      Tensor({1}, 1.0), &stats, NormMode::Eval);
  EXPECT_NEAR(y[0], 3.0, 1e-12);
}

TEST(BatchNorm, RejectsMismatchedParameters) {
  Tensor x({2, 3, 2}, 1.0);
  EXPECT_THROW(batch_norm(x, Tensor({2}, 1.0), Tensor({3}, 0.0), nullptr, NormMode::Train), ShapeError);
  EXPECT_THROW(batch_norm(x, Tensor({3}, 1.0), Tensor({3}, 0.0), nullptr, NormMode::Eval), ShapeError);
}

TEST(Activations, ReluPoolLinear) {
  auto r = relu(Tensor({2}, {-1.0, 2.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 2.0);

  auto p = global_avg_pool(Tensor({1, 2, 2, 2, 2}, 3.5));
  ASSERT_EQ(p.shape(), (Shape{1, 2}));
  EXPECT_DOUBLE_EQ(p[0], 3.5);
  EXPECT_DOUBLE_EQ(p[1], 3.5);

  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto y = linear(x, eye, Tensor({3}, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(linear(x, Tensor({3, 2}, 1.0), Tensor()), ShapeError);
}

TEST(CrossEntropy, KnownValues) {
  std::vector<int> labels{0, 3};
  auto uniform = softmax_cross_entropy(Tensor({2, 4}, 0.7), labels);
  EXPECT_NEAR(uniform.item(), std::log(4.0), 1e-15);

  auto two = softmax_cross_entropy(Tensor({1, 2}, {0.0, 0.0}), std::vector<int>{0});
  EXPECT_NEAR(two.item(), 0.6931, 1e-4);
  EXPECT_NEAR(two.item(), std::numbers::ln2, 1e-15);

  auto peaked = softmax_cross_entropy(Tensor({1, 3}, {40.0, 0.0, 0.0}), std::vector<int>{0});
  EXPECT_LT(peaked.item(), 1e-16);

  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 2}, 0.0), std::vector<int>{2}), ShapeError);
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 2}, 0.0), std::vector<int>{-1}), ShapeError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Tensor logits({1, 3}, {1.0, 2.0, 0.5}, true);
  softmax_cross_entropy(logits, std::vector<int>{1}).backward();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5);
  EXPECT_NEAR(logits.grad()[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(logits.grad()[1], std::exp(2.0) / z - 1.0, 1e-15);
  EXPECT_NEAR(logits.grad()[2], std::exp(0.5) / z, 1e-15);
}

TEST(DiceLoss, PerfectDisjointAndHandCounts) {
  // Binary masks over 10 voxels, class 1 is foreground.
  auto probs_for = [](const std::vector<int>& mask) {
    std::vector<double> v(2 * mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) {
      v[i] = 1.0 - mask[i];
      v[mask.size() + i] = mask[i];
    }
    return Tensor({1, 2, mask.size()}, v);
  };
  std::vector<int> y{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
  EXPECT_NEAR(dice_loss(probs_for(y), y, 1e-9).item(), 0.0, 1e-9);
  std::vector<int> disjoint{0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_NEAR(dice_loss(probs_for(disjoint), y, 1e-9).item(), 1.0, 1e-9);
  // |p ∩ y| = 3, |p| = 4, |y| = 6
  std::vector<int> p{1, 1, 1, 0, 0, 0, 1, 0, 0, 0};
  EXPECT_DOUBLE_EQ(1.0 - dice_loss(probs_for(p), y, 0.0).item(), 0.6);
}

TEST(Sgd, ScheduleEndpointsAndVanillaStep) {
  Tensor p({2}, {1.0, -2.0}, true);
  SgdOptimizer opt({p}, SgdSettings{0.01, 0.9, 4e-5, 0.9}, 100);
  EXPECT_EQ(opt.learning_rate_at(0), 0.01);
  EXPECT_EQ(opt.learning_rate_at(100), 0.0);
  EXPECT_NEAR(opt.learning_rate_at(50), 0.01 * std::pow(0.5, 0.9), 1e-18);

  Tensor q({2}, {1.0, -2.0}, true);
  SgdOptimizer plain({q}, SgdSettings{0.1, 0.0, 0.0, 0.9}, 10);
  q.mutable_grad()[0] = 0.5;
  q.mutable_grad()[1] = -1.0;
  plain.step();
  EXPECT_EQ(q[0], 1.0 - 0.1 * 0.5);
  EXPECT_EQ(q[1], -2.0 - 0.1 * -1.0);
}

TEST(Sgd, MomentumAndDecayRecurrence) {
  Tensor p({1}, {2.0}, true);
  SgdOptimizer opt({p}, SgdSettings{0.1, 0.5, 0.01, 1.0}, 4);
  double v = 0.0, value = 2.0;
  for (std::size_t t = 0; t < 3; ++t) {
    p.zero_grad();
    p.mutable_grad()[0] = 1.0;
    const double lr = 0.1 * (1.0 - t / 4.0);
    v = 0.5 * v + (1.0 + 0.01 * value);
    value -= lr * v;
    opt.step();
    EXPECT_NEAR(p[0], value, 1e-15);
  }
}

TEST(Sgd, RejectsNonFiniteGradient) {
  Tensor p({1}, {1.0}, true);
  SgdOptimizer opt({p}, SgdSettings{}, 10);
  p.mutable_grad()[0] = std::nan("");
  EXPECT_THROW(opt.step(), NumericalError);
  EXPECT_EQ(p[0], 1.0);
}

TEST(GradCheck, LinearLayerIsExactUpToRoundoff) {
  Rng rng(11);
  auto x = normal_tensor({3, 4}, 1.0, rng);
  auto w = normal_tensor({2, 4}, 1.0, rng);
  auto b = normal_tensor({2}, 1.0, rng);
  auto rep = grad_check([](const std::vector<Tensor>& in) { return sum(linear(in[0], in[1], in[2])); },
                        {x, w, b});
  EXPECT_LT(rep.max_relative_error, 1e-6);
  EXPECT_TRUE(rep.passed);
}

TEST(GradCheck, ConvReluMeanPipeline) {
  Rng rng(12);
  auto x = normal_tensor({2, 2, 4, 4, 4}, 1.0, rng);
  auto w = normal_tensor({3, 2, 3, 3, 3}, 0.3, rng);
  auto rep = grad_check([](const std::vector<Tensor>& in) { return mean(relu(conv3d(in[0], in[1]))); },
                        {x, w});
  EXPECT_LT(rep.max_relative_error, 1e-4);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  Rng rng(13);
  auto x = normal_tensor({1, 2, 3, 3, 3}, 1.0, rng);
  auto w = normal_tensor({2, 2, 3, 3, 3}, 0.3, rng);
  debug::corrupt_backward("conv");
  auto rep = grad_check([](const std::vector<Tensor>& in) { return sum(conv3d(in[0], in[1])); }, {x, w});
  debug::corrupt_backward("");
  EXPECT_FALSE(rep.passed);
}

TEST(GradCheck, FullSuiteOverTwentySeeds) {
  for (const auto& r : run_gradient_suite(20)) {
    EXPECT_TRUE(r.passed) << r.op << " worst " << r.worst_error;
    EXPECT_EQ(r.cases, 20u);
  }
}

TEST(Autograd, ReusedTensorAccumulatesGradient) {
  Tensor a({2}, {1.5, -0.5}, true);
  sum(mul(a, a)).backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], -1.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor a({2}, 1.0, true);
  NoGradGuard guard;
  auto y = sum(a);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(99);
    auto x = normal_tensor({2, 2, 4, 4, 4}, 1.0, rng);
    auto w = normal_tensor({3, 2, 3, 1, 3}, 0.5, rng, true);
    auto g = Tensor({3}, 1.0, true);
    auto b = Tensor({3}, 0.0, true);
    SgdOptimizer opt({w, g, b}, SgdSettings{}, 5);
    std::vector<double> trace;
    for (int it = 0; it < 5; ++it) {
      opt.zero_grad();
      auto y = relu(batch_norm(conv3d(x, w), g, b, nullptr, NormMode::Train));
      auto loss = softmax_cross_entropy(global_avg_pool(y), std::vector<int>{0, 2});
      loss.backward();
      opt.step();
      trace.push_back(loss.item());
    }
    trace.insert(trace.end(), w.values().begin(), w.values().end());
    return trace;
  };
  EXPECT_EQ(run(), run());
}
