// SPDX-License-Identifier: Apache-2.0
#include "frskd/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "frskd/rng.hpp"

using frskd::Axes;
using frskd::backward;
using frskd::GradientMap;
using frskd::Rng;
using frskd::Shape;
using frskd::Tensor;

using TD = Tensor<double>;

namespace {

TD random_tensor(Rng& rng, const Shape& shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> vals(frskd::shape_size(shape));
  for (double& v : vals) v = rng.uniform(lo, hi);
  return TD::create(shape, std::move(vals));
}

Shape random_shape(Rng& rng, std::size_t max_rank = 4, std::size_t max_extent = 6) {
  const std::size_t rank = 1 + rng.integer(max_rank);
  Shape s(rank);
  for (auto& d : s) d = 1 + rng.integer(max_extent);
  return s;
}

// Moves any coordinate within `margin` of a relu kink (zero) away from it.
TD away_from_zero(const TD& t, double margin = 1e-3) {
  std::vector<double> vals(t.values());
  for (double& v : vals) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return TD::create(t.shape(), std::move(vals));
}

}  // namespace

TEST(Create, StoresValuesRowMajor) {
  TD t = TD::create({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(t.size(), 4u);
  EXPECT_EQ(t.values(), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_FALSE(t.has_lineage());
}

TEST(Create, ScalarLike) {
  TD t = TD::create({1}, {0});
  EXPECT_EQ(t.size(), 1u);
  EXPECT_EQ(t.scalar_value(), 0.0);
}

TEST(Create, LengthMismatchThrows) {
  EXPECT_THROW(TD::create({3}, {1, 2}), frskd::ShapeError);
}

TEST(Create, NonFiniteThrows) {
  EXPECT_THROW(TD::create({2}, {1.0, std::numeric_limits<double>::infinity()}), frskd::ValueError);
  EXPECT_THROW(TD::create({1}, {std::nan("")}), frskd::ValueError);
}

TEST(Elementwise, Relu) {
  TD t = relu(TD::create({3}, {-1, 0, 2}));
  EXPECT_EQ(t.values(), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, AddBroadcast) {
  TD t = add(TD::create({2}, {1, 2}), TD::create({1}, {10}));
  EXPECT_EQ(t.values(), (std::vector<double>{11, 12}));
}

TEST(Elementwise, SquareBackward) {
  TD x = TD::create({1}, {3}, true);
  GradientMap<double> gm = backward(square(x));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{6}));
}

TEST(Elementwise, IncompatibleShapesThrow) {
  EXPECT_THROW(add(TD::create({2}, {1, 2}), TD::create({3}, {1, 2, 3})), frskd::ShapeError);
}

TEST(Elementwise, DomainViolationsThrow) {
  EXPECT_THROW(frskd::log(TD::create({2}, {1.0, 0.0})), frskd::ValueError);
  EXPECT_THROW(frskd::log(TD::create({1}, {-1.0})), frskd::ValueError);
  EXPECT_THROW(frskd::sqrt(TD::create({1}, {-1.0})), frskd::ValueError);
  EXPECT_THROW(div(TD::create({1}, {1.0}), TD::create({1}, {0.0})), frskd::ValueError);
}

TEST(Elementwise, DispatchArity) {
  TD a = TD::create({2}, {1, 2});
  EXPECT_THROW(frskd::elementwise(frskd::EwKind::add, a), frskd::ShapeError);
  EXPECT_THROW(frskd::elementwise(frskd::EwKind::relu, a, &a), frskd::ShapeError);
  EXPECT_EQ(frskd::elementwise(frskd::EwKind::square, a).values(), (std::vector<double>{1, 4}));
}

TEST(Elementwise, ExpOverflowThrows) {
  EXPECT_THROW(frskd::exp(TD::create({1}, {1000.0})), frskd::ValueError);
}

TEST(Reduce, SumAlongAxis) {
  TD t = frskd::sum(TD::create({2, 2}, {1, 2, 3, 4}), Axes{1});
  EXPECT_EQ(t.shape(), (Shape{2}));
  EXPECT_EQ(t.values(), (std::vector<double>{3, 7}));
}

TEST(Reduce, Mean) {
  TD t = frskd::mean(TD::create({2}, {2, 4}), Axes{0});
  EXPECT_EQ(t.shape(), Shape{});
  EXPECT_EQ(t.scalar_value(), 3.0);
}

TEST(Reduce, MaxRoutesGradientToArgmax) {
  TD x = TD::create({3}, {1, 5, 2}, true);
  TD m = frskd::reduce_max(x, Axes{0});
  EXPECT_EQ(m.scalar_value(), 5.0);
  GradientMap<double> gm = backward(m);
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{0, 1, 0}));
}

TEST(Reduce, MaxTieBreaksToFirst) {
  TD x = TD::create({4}, {7, 3, 7, 7}, true);
  GradientMap<double> gm = backward(frskd::reduce_max(x, Axes{0}));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Reduce, InvalidAxisThrows) {
  TD t = TD::create({2}, {1, 2});
  EXPECT_THROW(frskd::sum(t, Axes{1}), frskd::ShapeError);
  EXPECT_THROW(frskd::sum(t, Axes{0, 0}), frskd::ShapeError);
}

TEST(Reduce, KeepdimsShape) {
  TD t = frskd::sum(TD::create({2, 3}, {1, 1, 1, 1, 1, 1}), Axes{1}, true);
  EXPECT_EQ(t.shape(), (Shape{2, 1}));
}

TEST(Matmul, IdentityActsTrivially) {
  TD id = TD::create({2, 2}, {1, 0, 0, 1});
  TD m = TD::create({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(id, m).values(), m.values());
}

TEST(Matmul, RowTimesColumn) {
  TD t = matmul(TD::create({1, 2}, {1, 2}), TD::create({2, 1}, {3, 4}));
  EXPECT_EQ(t.shape(), (Shape{1, 1}));
  EXPECT_EQ(t.scalar_value(), 11.0);
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(TD::create({1, 2}, {1, 2}), TD::create({3, 1}, {1, 2, 3})), frskd::ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifference) {
  Rng rng(7);
  TD a = random_tensor(rng, {3, 4});
  TD b = random_tensor(rng, {4, 2});
  const double err_a = frskd::finite_diff_check(
      [&](const TD& x) { return frskd::sum_all(matmul(x, b)); }, a, 1e-5);
  const double err_b = frskd::finite_diff_check(
      [&](const TD& x) { return frskd::sum_all(matmul(a, x)); }, b, 1e-5);
  EXPECT_LT(err_a, 1e-6);
  EXPECT_LT(err_b, 1e-6);
}

TEST(Backward, SumGivesOnes) {
  TD x = TD::create({3}, {4, 5, 6}, true);
  GradientMap<double> gm = backward(frskd::sum_all(x));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  TD x = TD::create({3}, {1, 2, 3}, true);
  GradientMap<double> gm = backward(frskd::sum_all(square(x)));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
  TD x = TD::create({1}, {5}, true);
  TD y = mul(x, TD::scalar(1.0));
  GradientMap<double> gm = backward(frskd::sum_all(add(y, y)));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{2}));
}

TEST(Backward, NonScalarLossThrows) {
  TD x = TD::create({2}, {1, 2}, true);
  EXPECT_THROW(backward(square(x)), frskd::ShapeError);
}

TEST(Backward, NoLineageThrows) {
  TD x = TD::create({1}, {1}, true);
  EXPECT_THROW(backward(x), frskd::GraphError);
}

TEST(Backward, NoEntryForNonGradInputs) {
  TD x = TD::create({2}, {1, 2}, true);
  TD c = TD::create({2}, {3, 4});  // requires_grad = false
  GradientMap<double> gm = backward(frskd::sum_all(mul(x, c)));
  EXPECT_TRUE(gm.contains(x));
  EXPECT_FALSE(gm.contains(c));
}

TEST(Backward, DeterministicAcrossCalls) {
  Rng rng(11);
  TD x = TD::create({4, 3}, random_tensor(rng, {4, 3}).values(), true);
  TD w = TD::create({3, 2}, random_tensor(rng, {3, 2}).values(), true);
  TD h = relu(matmul(x, w));
  TD loss = frskd::sum_all(mul(h, h));
  GradientMap<double> g1 = backward(loss);
  GradientMap<double> g2 = backward(loss);
  EXPECT_EQ(g1.at(x).values(), g2.at(x).values());
  EXPECT_EQ(g1.at(w).values(), g2.at(w).values());
}

TEST(Detach, SeversGradient) {
  TD x = TD::create({2}, {1, 2}, true);
  TD loss = frskd::sum_all(square(x.detach()));
  EXPECT_FALSE(loss.has_lineage());
  // With no lineage there is nothing to differentiate.
  EXPECT_THROW(backward(loss), frskd::GraphError);
}

TEST(Detach, ValuesBitEqual) {
  TD x = TD::create({3}, {0.1, -0.25, 7});
  EXPECT_EQ(x.detach().values(), x.values());
}

TEST(Detach, OneBranchSevered) {
  TD x = TD::create({1}, {3}, true);
  GradientMap<double> gm = backward(frskd::sum_all(mul(x, x.detach())));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{3}));
}

TEST(FiniteDiff, SumOfSquares) {
  Rng rng(3);
  TD x = random_tensor(rng, {2, 3});
  const double err = frskd::finite_diff_check(
      [](const TD& t) { return frskd::sum_all(square(t)); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(FiniteDiff, ReluAwayFromKink) {
  Rng rng(4);
  TD x = away_from_zero(random_tensor(rng, {3, 3}));
  const double err = frskd::finite_diff_check(
      [](const TD& t) { return frskd::sum_all(relu(t)); }, x, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(FiniteDiff, ConstantFunctionIsExactlyZero) {
  TD x = TD::create({2}, {1, 2});
  const double err = frskd::finite_diff_check(
      [](const TD&) { return TD::scalar(42.0); }, x, 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(FiniteDiff, NonScalarFunctionThrows) {
  TD x = TD::create({2}, {1, 2});
  EXPECT_THROW(frskd::finite_diff_check([](const TD& t) { return t; }, x, 1e-5), frskd::ShapeError);
}

// Every differentiable primitive, 10 random instances each, shapes up to four
// dimensions with extents <= 6, kinks avoided by resampling.
TEST(GradOracle, AllPrimitives) {
  Rng rng(2024);
  constexpr double kTol = 1e-4;
  constexpr double kEps = 1e-5;

  for (int trial = 0; trial < 10; ++trial) {
    const Shape s = random_shape(rng);
    TD a = random_tensor(rng, s);
    TD b = random_tensor(rng, s);
    TD pos = random_tensor(rng, s, 0.5, 2.0);     // valid domain for log/sqrt/div
    TD akink = away_from_zero(a);

    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(add(x, b)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(sub(b, x)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(mul(x, b)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(div(b, x)); }, pos, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(div(x, pos)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(relu(x)); }, akink, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(square(x)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(frskd::sqrt(x)); }, pos, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(frskd::exp(x)); }, a, kEps), kTol);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(frskd::log(x)); }, pos, kEps), kTol);

    // Reductions over a random axis subset.
    Axes axes;
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (rng.bernoulli(0.5)) axes.push_back(d);
    }
    if (axes.empty()) axes.push_back(0);
    const bool keep = rng.bernoulli(0.5);
    EXPECT_LT(frskd::finite_diff_check(
                  [&](const TD& x) { return frskd::sum_all(square(frskd::sum(x, axes, keep))); }, a, kEps),
              kTol);
    EXPECT_LT(frskd::finite_diff_check(
                  [&](const TD& x) { return frskd::sum_all(square(frskd::mean(x, axes, keep))); }, a, kEps),
              kTol);

    // Max needs tie-free groups; nudge duplicates apart.
    {
      std::vector<double> vals(a.values());
      std::sort(vals.begin(), vals.end());
      TD ax = a;
      bool has_near_tie = false;
      for (std::size_t i = 1; i < vals.size(); ++i) {
        if (vals[i] - vals[i - 1] < 1e-3) has_near_tie = true;
      }
      if (has_near_tie) {
        std::vector<double> fresh(a.size());
        for (std::size_t i = 0; i < fresh.size(); ++i) fresh[i] = static_cast<double>(i) * 0.37 + rng.uniform();
        rng.shuffle(fresh.begin(), fresh.end());
        ax = TD::create(s, std::move(fresh));
      }
      EXPECT_LT(frskd::finite_diff_check(
                    [&](const TD& x) { return frskd::sum_all(square(frskd::reduce_max(x, axes, keep))); }, ax, kEps),
                kTol);
    }

    // Broadcast operand (trailing axes collapsed to 1).
    Shape bshape = s;
    for (std::size_t d = 0; d < bshape.size(); ++d) {
      if (rng.bernoulli(0.5)) bshape[d] = 1;
    }
    TD c = random_tensor(rng, bshape);
    EXPECT_LT(frskd::finite_diff_check([&](const TD& x) { return frskd::sum_all(square(mul(a, x))); }, c, kEps),
              kTol);
  }
}

TEST(Broadcast, GradientReducesToOperandShape) {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s = random_shape(rng);
    Shape bshape = s;
    for (auto& d : bshape) {
      if (rng.bernoulli(0.5)) d = 1;
    }
    TD a = random_tensor(rng, s);
    TD b = TD::create(bshape, random_tensor(rng, bshape).values(), true);
    GradientMap<double> gm = backward(frskd::sum_all(mul(a, b)));
    TD gb = gm.at(b);
    ASSERT_EQ(gb.shape(), bshape);
    // The gradient of the broadcast operand is the sum of a over expanded axes.
    TD expected = frskd::reduce_to_shape(a, bshape);
    for (std::size_t i = 0; i < gb.size(); ++i) {
      EXPECT_NEAR(gb.values()[i], expected.values()[i], 1e-12);
    }
  }
}

TEST(Reshape, RoundTripsGradient) {
  TD x = TD::create({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  TD y = frskd::reshape(x, {3, 2});
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  GradientMap<double> gm = backward(frskd::sum_all(square(y)));
  EXPECT_EQ(gm.at(x).shape(), (Shape{2, 3}));
  EXPECT_EQ(gm.at(x).values(), (std::vector<double>{2, 4, 6, 8, 10, 12}));
}

TEST(Transpose, ValuesAndGradient) {
  TD x = TD::create({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  TD t = frskd::transpose2d(x);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_EQ(t.values(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  Rng rng(5);
  const double err = frskd::finite_diff_check(
      [](const TD& v) { return frskd::sum_all(square(frskd::transpose2d(v))); }, random_tensor(rng, {3, 4}), 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(NoGradScope, SuppressesRecording) {
  TD x = TD::create({2}, {1, 2}, true);
  frskd::autograd::NoGradScope guard;
  TD y = square(x);
  EXPECT_FALSE(y.has_lineage());
}
