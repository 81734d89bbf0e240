#include <gtest/gtest.h>

#include "cakes/kernel_space.hpp"
#include "cakes/ops.hpp"
#include "cakes/random.hpp"
#include "oracles.hpp"

using namespace cakes;

TEST(KernelShape, RejectsEvenOrNonPositiveExtents) {
  EXPECT_THROW(KernelShape(2, 3, 3), ShapeError);
  EXPECT_THROW(KernelShape(0, 1, 1), ShapeError);
  EXPECT_NO_THROW(KernelShape(5, 1, 3));
}

TEST(KernelShape, ClassCountsNonUnitAxes) {
  EXPECT_EQ(KernelShape(1, 1, 1).kernel_class(), KernelClass::Pointwise);
  EXPECT_EQ(KernelShape(3, 1, 1).kernel_class(), KernelClass::Conv1D);
  EXPECT_EQ(KernelShape(1, 3, 3).kernel_class(), KernelClass::Conv2D);
  EXPECT_EQ(KernelShape(3, 3, 3).kernel_class(), KernelClass::Conv3D);
}

TEST(KernelShape, StringRoundTrip) {
  KernelShape s(1, 3, 5);
  EXPECT_EQ(s.str(), "1x3x5");
  EXPECT_EQ(KernelShape::parse("1x3x5"), s);
  for (auto bad : {"", "1x3", "1x3x", "1x3x3x1", "axbxc", "1x2x3", "1 x3x3", "3x3x3 "})
    EXPECT_THROW(KernelShape::parse(bad), ShapeError) << bad;
}

TEST(Enumerate, DefaultSetHasSevenShapesInOrder) {
  auto set = default_subkernel_set();
  std::vector<std::string> expected = {"3x3x3", "1x3x3", "3x1x3", "3x3x1", "1x1x3", "1x3x1", "3x1x1"};
  EXPECT_EQ(set.names(), expected);
}

TEST(Enumerate, IncludingPointwiseGivesEight) {
  auto set = enumerate_subkernels({3, 3, 3}, {1, 3}, false);
  EXPECT_EQ(set.size(), 8u);
  EXPECT_EQ(set.candidates().back(), KernelShape(1, 1, 1));
}

TEST(Enumerate, FullCuboidOptionCount) {
  EXPECT_EQ(cuboid_subkernel_options({3, 3, 3}), 27);
  // Odd-only enumeration with the full odd range is a subset.
  EXPECT_EQ(enumerate_subkernels({3, 3, 3}, {1, 3}, false).size(), 8u);
  EXPECT_EQ(enumerate_subkernels({5, 5, 5}, {1, 3, 5}, false).size(), 27u);
}

TEST(Enumerate, ChoicesClippedToBaseAndEmptyRejected) {
  auto set = enumerate_subkernels({1, 3, 3}, {1, 3}, true);
  EXPECT_EQ(set.names(), (std::vector<std::string>{"1x3x3", "1x1x3", "1x3x1"}));
  EXPECT_THROW(enumerate_subkernels({1, 1, 1}, {1}, true), std::invalid_argument);
  EXPECT_THROW(enumerate_subkernels({3, 3, 3}, {2}, true), ShapeError);
}

TEST(SubKernelSet, RejectsDuplicatesAndOversizedCandidates) {
  EXPECT_THROW(SubKernelSet({3, 3, 3}, {{1, 3, 3}, {1, 3, 3}}), std::invalid_argument);
  EXPECT_THROW(SubKernelSet({1, 3, 3}, {{3, 3, 3}}), ShapeError);
  EXPECT_THROW(SubKernelSet({3, 3, 3}, {}), std::invalid_argument);
  SubKernelSet s({3, 3, 3}, {{3, 1, 1}, {3, 3, 3}});
  EXPECT_EQ(s.index_of({3, 3, 3}), 1u);  // given order is kept
  EXPECT_THROW(s.index_of({1, 1, 3}), std::out_of_range);
}

TEST(Embed, CentredPlacementOfOneByOneByThree) {
  Tensor w({1, 1, 1, 1, 3}, {7.0, 8.0, 9.0});
  auto e = embed_subkernel(w, {3, 3, 3});
  ASSERT_EQ(e.shape(), (Shape{1, 1, 3, 3, 3}));
  for (std::size_t i = 0; i < 27; ++i) {
    std::size_t d = i / 9, h = (i / 3) % 3, ww = i % 3;
    double expected = (d == 1 && h == 1) ? 7.0 + static_cast<double>(ww) : 0.0;
    EXPECT_EQ(e[i], expected);
  }
}

TEST(Embed, BaseShapedInputIsIdentity) {
  Rng rng(3);
  auto w = normal_tensor({2, 3, 3, 3, 3}, 1.0, rng);
  auto e = embed_subkernel(w, {3, 3, 3});
  ASSERT_EQ(e.shape(), w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(e[i], w[i]);
}

TEST(Embed, RejectsEvenExtentsAndOversize) {
  EXPECT_THROW(embed_subkernel(Tensor({1, 1, 1, 2, 1}), {3, 3, 3}), ShapeError);
  EXPECT_THROW(embed_subkernel(Tensor({1, 1, 5, 1, 1}), {3, 3, 3}), ShapeError);
}

TEST(Embed, ConvolutionEquivalenceForEverySubShape) {
  Rng rng(11);
  const auto set = default_subkernel_set();
  for (const auto& s : set.candidates()) {
    for (int rep = 0; rep < 5; ++rep) {
      auto x = normal_tensor({2, 3, 5, 4, 6}, 1.0, rng);
      auto w = normal_tensor({4, 3, (std::size_t)s.d, (std::size_t)s.h, (std::size_t)s.w}, 1.0, rng);
      auto y_sub = conv3d(x, w);
      auto y_emb = conv3d(x, embed_subkernel(w, {3, 3, 3}));
      EXPECT_LT(oracle::max_relative_error(y_sub, y_emb), 1e-12) << s.str();
      EXPECT_LT(oracle::max_relative_error(y_sub, oracle::naive_conv3d(x, w)), 1e-12) << s.str();
    }
  }
}

TEST(Cost, ParamAndFlopCounts) {
  EXPECT_EQ(param_count({1, 3, 3}, 2, 4), 72);
  EXPECT_EQ(flop_count({1, 1, 1}, 1, 1, 8), 16);
  auto p3 = param_count({3, 3, 3}, 8, 8), p2 = param_count({1, 3, 3}, 8, 8), p1 = param_count({3, 1, 1}, 8, 8);
  EXPECT_EQ(p3, 9 * p1);
  EXPECT_EQ(p2, 3 * p1);
}

TEST(Cost, MonotoneInElementwiseContainment) {
  const auto all = enumerate_subkernels({5, 5, 5}, {1, 3, 5}, false).candidates();
  for (const auto& a : all)
    for (const auto& b : all) {
      if (!a.fits_within(b)) continue;
      EXPECT_LE(param_count(a, 3, 5), param_count(b, 3, 5));
      EXPECT_LE(flop_count(a, 3, 5, 7), flop_count(b, 3, 5, 7));
      if (a.volume() != b.volume()) {
        EXPECT_LT(param_count(a, 3, 5), param_count(b, 3, 5));
      }
    }
}

TEST(Beta, DefaultSetIsNineThreeOneOverThirteen) {
  auto set = default_subkernel_set();
  auto beta = cost_beta(set);
  ASSERT_EQ(beta.size(), 7u);
  for (std::size_t i = 0; i < set.size(); ++i) {
    double expected = set[i].kernel_class() == KernelClass::Conv3D   ? 9.0 / 13.0
                      : set[i].kernel_class() == KernelClass::Conv2D ? 3.0 / 13.0
                                                                       : 1.0 / 13.0;
    EXPECT_EQ(beta[i], expected) << set[i].str();
  }
}

TEST(Beta, SingleCandidateAndTwoClassCases) {
  EXPECT_EQ(cost_beta(SubKernelSet({3, 3, 3}, {{3, 3, 3}})), std::vector<double>{1.0});
  auto beta = cost_beta(SubKernelSet({3, 3, 3}, {{1, 3, 3}, {3, 3, 1}, {1, 1, 3}}));
  EXPECT_EQ(beta, (std::vector<double>{0.75, 0.75, 0.25}));
}

TEST(Beta, PositiveAndConstantWithinClass) {
  auto set = enumerate_subkernels({5, 3, 3}, {1, 3, 5}, false);
  auto beta = cost_beta(set);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_GT(beta[i], 0.0);
    for (std::size_t j = 0; j < set.size(); ++j)
      if (set[i].kernel_class() == set[j].kernel_class()) {
        EXPECT_EQ(beta[i], beta[j]);
      }
  }
}
