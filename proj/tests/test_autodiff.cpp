#include <gtest/gtest.h>

#include <cmath>

#include "ranktide/autodiff.hpp"
#include "ranktide/gradcheck.hpp"
#include "ranktide/rng.hpp"

using namespace ranktide;
using namespace ranktide::ad;

namespace {

Tensor randn(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = rng.normal();
  return t;
}

/// sum(y * R) for a fixed random R of y's shape.
Value weighted_sum(Value y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.tape().constant(randn(rng, y.shape()))));
}

}  // namespace

TEST(Shape, RejectsBadRanksAndExtents) {
  EXPECT_THROW(Shape(std::vector<std::size_t>{}), Error);
  EXPECT_THROW((Shape{1, 2, 3, 4, 5}), Error);
  EXPECT_THROW((Shape{3, 0}), Error);
  EXPECT_EQ((Shape{2, 3, 4}).numel(), 24u);
  EXPECT_EQ((Shape{2, 3}).str(), "[2x3]");
}

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape t;
  const Value i2 = t.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  const Value m = t.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  const Value r = matmul(i2, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tape t;
  const Value r = matmul(t.constant(Tensor(Shape{1, 2}, {1, 2})), t.constant(Tensor(Shape{2, 1}, {3, 4})));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor(Shape{2, 3})), t.constant(Tensor(Shape{2, 3}))), Error);
}

TEST(Matmul, GradientMatchesFiniteDifference) {
  Rng rng(1);
  const auto r = grad_check([](Tape&, std::span<const Value> in) { return weighted_sum(matmul(in[0], in[1]), 9); },
                            {randn(rng, Shape{3, 4}), randn(rng, Shape{4, 2})}, 1e-5, 1e-6);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Softmax, EqualLogitsGiveUniform) {
  Tape t;
  const Value s = softmax(t.constant(Tensor(Shape{4}, 0.0)), 0);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Tape t;
  const Value s = softmax(t.constant(Tensor(Shape{2}, {1000.0, 0.0})), 0);
  EXPECT_EQ(s.data()[0], 1.0);
  EXPECT_EQ(s.data()[1], 0.0);
}

TEST(Softmax, RowsSumToOneAndAreNonNegative) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tape t;
    Tensor x = randn(rng, Shape{5, 7});
    for (double& v : x.data) v *= 10.0;
    for (std::size_t axis : {0u, 1u}) {
      const Value s = softmax(t.constant(x), axis);
      const std::size_t rows = axis == 1 ? 5 : 7, cols = axis == 1 ? 7 : 5;
      for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = axis == 1 ? s.data()[r * 7 + c] : s.data()[c * 7 + r];
          EXPECT_GE(v, 0.0);
          total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, JacobianMatchesFiniteDifference) {
  Rng rng(3);
  const auto r = grad_check([](Tape&, std::span<const Value> in) { return weighted_sum(softmax(in[0], 0), 4); },
                            {randn(rng, Shape{6})}, 1e-5, 1e-6);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Elementwise, SigmoidOfZeroIsHalf) {
  Tape t;
  EXPECT_EQ(sigmoid(t.scalar(0.0)).item(), 0.5);
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{3}, {-1.0, 0.0, 2.0}));
  t.backward(sum(relu(x)));
  const Tensor g = t.grad_of(x);
  EXPECT_EQ(g.data, (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape t;
  EXPECT_THROW(add(t.constant(Tensor(Shape{2})), t.constant(Tensor(Shape{3}))), Error);
  EXPECT_THROW(mul(t.constant(Tensor(Shape{2, 1})), t.constant(Tensor(Shape{2}))), Error);
}

TEST(Reductions, GlobalAvgPoolOfConstantMap) {
  Tape t;
  const Value p = global_avg_pool(t.constant(Tensor(Shape{3, 4, 5}, 7.0)));
  EXPECT_EQ(p.shape(), (Shape{3}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 7.0);
}

TEST(Reductions, MeanGradientIsOneOverN) {
  Rng rng(4);
  Tape t;
  const Value x = t.leaf(randn(rng, Shape{3, 5}));
  t.backward(mean(x));
  for (double g : t.grad_of(x).data) EXPECT_DOUBLE_EQ(g, 1.0 / 15.0);
  const auto r = grad_check([](Tape&, std::span<const Value> in) { return mean(in[0]); }, {randn(rng, Shape{3, 5})});
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Reductions, AxisSumsDropTheAxis) {
  Tape t;
  const Value x = t.constant(Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  const Value s0 = sum(x, 0), s1 = sum(x, 1), m1 = mean(x, 1);
  EXPECT_EQ(s0.shape(), (Shape{3}));
  EXPECT_EQ(std::vector<double>(s0.data().begin(), s0.data().end()), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(std::vector<double>(s1.data().begin(), s1.data().end()), (std::vector<double>{6, 15}));
  EXPECT_EQ(std::vector<double>(m1.data().begin(), m1.data().end()), (std::vector<double>{2, 5}));
  EXPECT_THROW(sum(x, 2), Error);
}

TEST(Reductions, MaxMinRouteGradientToFirstExtremum) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{4}, {3.0, 1.0, 3.0, 1.0}));
  t.backward(add(max(x), min(x)));
  EXPECT_EQ(t.grad_of(x).data, (std::vector<double>{1.0, 1.0, 0.0, 0.0}));
}

TEST(Reductions, L2NormSubgradientAtZero) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{3}, 0.0));
  const Value n = l2_norm(x);
  EXPECT_EQ(n.item(), 0.0);
  t.backward(n);
  for (double g : t.grad_of(x).data) EXPECT_EQ(g, 0.0);
}

TEST(Conv2d, OneByOneIdentityKernelIsIdentity) {
  Rng rng(5);
  Tape t;
  const Tensor x = randn(rng, Shape{3, 4, 5});
  Tensor w(Shape{3, 3, 1, 1}, 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  const Value y = conv2d(t.constant(x), t.constant(w), 1, 0);
  EXPECT_EQ(y.shape(), x.shape);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), x.data);
}

TEST(Conv2d, OneByOneOnSinglePixelIsMatmul) {
  Rng rng(6);
  Tape t;
  const Tensor x = randn(rng, Shape{3, 1, 1}), w = randn(rng, Shape{4, 3, 1, 1});
  const Value y = conv2d(t.constant(x), t.constant(w), 1, 0);
  const Value m = matmul(t.constant(Tensor(Shape{4, 3}, w.data)), t.constant(Tensor(Shape{3, 1}, x.data)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.data()[i], m.data()[i]);
}

TEST(Conv2d, CrossCorrelationConvention) {
  Tape t;
  // A kernel with a single 1 at its top-left picks the up-left neighbour.
  Tensor w(Shape{1, 1, 3, 3}, 0.0);
  w[0] = 1.0;
  Tensor x(Shape{1, 3, 3}, 0.0);
  x[0] = 5.0;  // top-left pixel
  const Value y = conv2d(t.constant(x), t.constant(w), 1, 1);
  EXPECT_EQ(y.data()[4], 5.0);  // centre output reads (row-1, col-1)
  EXPECT_EQ(y.data()[0], 0.0);
}

TEST(Conv2d, GradientMatchesFiniteDifference) {
  Rng rng(7);
  const auto r = grad_check([](Tape&, std::span<const Value> in) { return weighted_sum(conv2d(in[0], in[1], 1, 1), 11); },
                            {randn(rng, Shape{3, 8, 8}), randn(rng, Shape{4, 3, 3, 3})}, 1e-5, 1e-5);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(Conv2d, NonIntegralExtentThrows) {
  Tape t;
  EXPECT_THROW(conv2d(t.constant(Tensor(Shape{1, 4, 4})), t.constant(Tensor(Shape{1, 1, 3, 3})), 2, 0), Error);
  EXPECT_THROW(conv2d(t.constant(Tensor(Shape{2, 4, 4})), t.constant(Tensor(Shape{1, 1, 3, 3})), 1, 1), Error);
}

TEST(Pooling, AvgPool2dAveragesBlocks) {
  Tape t;
  const Value y = avg_pool2d(t.constant(Tensor(Shape{1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8})), 2);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2}));
  EXPECT_DOUBLE_EQ(y.data()[0], 3.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 5.5);
  EXPECT_THROW(avg_pool2d(t.constant(Tensor(Shape{1, 3, 4})), 2), Error);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tape t;
  EXPECT_NEAR(cross_entropy(t.constant(Tensor(Shape{3}, 0.0)), 1).item(), std::log(3.0), 1e-15);
  EXPECT_THROW(cross_entropy(t.constant(Tensor(Shape{3}, 0.0)), 3), Error);
}

TEST(GradCheck, QuadraticIsExact) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(t.grad_of(x).data, (std::vector<double>{2.0, 4.0}));
  const auto r =
      grad_check([](Tape&, std::span<const Value> in) { return sum(mul(in[0], in[0])); }, {Tensor(Shape{2}, {1.0, 2.0})});
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  const auto r = grad_check([](Tape& t, std::span<const Value>) { return t.scalar(3.0); }, {Tensor(Shape{3}, 1.0)});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto wrong = [](Tape&, std::span<const Value> in) {
    const Value x = in[0];
    Tensor out(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    const Value y = x.tape().record("bad", std::move(out), {x}, [x](Tape& t, Value, std::span<const double> g) {
      auto s = t.grad_sink(x);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += 0.5 * g[i];
    });
    return sum(y);
  };
  EXPECT_FALSE(grad_check(wrong, {Tensor(Shape{3}, 1.0)}).passed);
}

TEST(GradCheck, NonFiniteEvaluationThrows) {
  auto f = [](Tape&, std::span<const Value> in) { return sum(sqrt(in[0])); };
  EXPECT_THROW(grad_check(f, {Tensor(Shape{2}, {-1.0, 1.0})}), Error);
}

TEST(Tape, DiamondGraphAccumulatesBothPaths) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{2}, {0.3, -0.7}));
  const Value a = sigmoid(x), b = mul(x, x);
  t.backward(sum(mul(add(a, b), a)));  // x feeds a twice and b once
  const Tensor g = t.grad_of(x);
  for (std::size_t i = 0; i < 2; ++i) {
    const double xv = x.data()[i], s = 1 / (1 + std::exp(-xv)), ds = s * (1 - s);
    // d/dx[(s + x^2) s] = (ds + 2x) s + (s + x^2) ds
    EXPECT_NEAR(g[i], (ds + 2 * xv) * s + (s + xv * xv) * ds, 1e-15);
  }
  const auto r = grad_check(
      [](Tape&, std::span<const Value> in) {
        const Value a = sigmoid(in[0]);
        return sum(mul(add(a, mul(in[0], in[0])), a));
      },
      {Tensor(Shape{2}, {0.3, -0.7})});
  EXPECT_TRUE(r.passed);
}

TEST(Tape, ReplayIsBitwiseDeterministic) {
  Rng rng(8);
  const Tensor x0 = randn(rng, Shape{2, 6, 6}), w0 = randn(rng, Shape{3, 2, 3, 3});
  auto run = [&] {
    Tape t;
    const Value x = t.leaf(x0), w = t.leaf(w0);
    const Value y = mean(softmax(reshape(conv2d(x, w, 1, 1), Shape{3, 36}), 1));
    t.backward(y);
    return std::make_tuple(y.item(), t.grad_of(x).data, t.grad_of(w).data);
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, BackwardRequiresScalar) {
  Tape t;
  const Value x = t.leaf(Tensor(Shape{2}, 1.0));
  EXPECT_THROW(t.backward(x), Error);
}

TEST(Tape, NonFiniteValuesAreRejected) {
  Tape t;
  Tensor bad(Shape{1}, std::nan(""));
  EXPECT_THROW(t.leaf(bad), Error);
  EXPECT_THROW(sqrt(t.constant(Tensor(Shape{1}, -1.0))), Error);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape t;
  const Value c = t.constant(Tensor(Shape{2}, 1.0));
  const Value x = t.leaf(Tensor(Shape{2}, 2.0));
  t.backward(sum(mul(c, x)));
  EXPECT_TRUE(c.grad().empty());
  EXPECT_EQ(t.grad_of(x).data, (std::vector<double>{1.0, 1.0}));
}
