// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rcnnhw/autodiff.hpp"
#include "rcnnhw/gradcheck.hpp"
#include "rcnnhw/random.hpp"

namespace rcnnhw {
namespace {

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(-2.0, 2.0);
  return t;
}

// Reference matmul, deliberately naive.
Tensor triple_loop(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(shape_str(t.shape()), "[2x3]");
  for (double v : t.data()) EXPECT_EQ(v, 1.5);
}

TEST(Tensor, ZeroDimensionRejected) {
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
}

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, AllFinite) {
  Tensor t = Tensor::vector({1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  Tape tape;
  Var c = matmul(tape.constant(a), tape.constant(b));
  EXPECT_LE(max_abs_diff(c.value(), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Tape tape;
  EXPECT_THROW(matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3}))),
               DimensionError);
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(add(tape.constant(Tensor({2, 3})), tape.constant(Tensor({3, 2}))), DimensionError);
}

TEST(AddBias, BroadcastsOverLeadingDims) {
  Tape tape;
  Tensor x({2, 2, 3}, 1.0);
  Var y = add_bias(tape.constant(x), tape.constant(Tensor::vector({1, 2, 3})));
  EXPECT_EQ(y.value().at(1, 1, 2), 4.0);
  EXPECT_THROW(add_bias(tape.constant(x), tape.constant(Tensor::vector({1, 2}))), DimensionError);
}

TEST(Relu, DerivativeAtZeroIsZero) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  tape.backward(sum(relu(x)));
  const Tensor& g = *tape.grad(x.id());
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 1.0);
}

TEST(MaxOverAxis, TiesPickFirstOccurrence) {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 3, 1}, std::vector<double>{2.0, 2.0, 1.0}));
  MaxResult m = max_over_axis(x, 1);
  EXPECT_EQ(m.argmax[0], 0u);
  tape.backward(sum(m.values));
  const Tensor& g = *tape.grad(x.id());
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  Tape tape;
  Tensor logits = random_tensor({4, 5}, rng);
  logits.at(0, 0) = 700.0;  // overflow guard
  Var p = softmax(tape.constant(logits));
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += p.value().at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Backward, RequiresScalarLoss) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({3.0}));
  tape.backward(sum(add(mul(x, x), x)));  // d/dx (x² + x) = 2x + 1
  EXPECT_DOUBLE_EQ((*tape.grad(x.id()))[0], 7.0);
}

TEST(Backward, ParameterGradientGoesToSink) {
  Parameter p(Tensor::vector({1.0, -2.0}));
  Tape tape;
  tape.backward(sum(mul(tape.param(p), tape.param(p))));
  EXPECT_DOUBLE_EQ(p.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -4.0);
}

TEST(Backward, NonRecordingTapeStoresNoGradients) {
  Parameter p(Tensor::vector({1.0}));
  Tape tape(false);
  Var y = sum(mul(tape.param(p), tape.param(p)));
  EXPECT_DOUBLE_EQ(y.value()[0], 1.0);
  EXPECT_FALSE(tape.requires_grad(y.id()));
}

TEST(ConcatSlice, RoundTrip) {
  Rng rng(5);
  Tape tape;
  const Tensor a = random_tensor({2, 3, 2}, rng);
  const Tensor b = random_tensor({2, 3, 4}, rng);
  Var c = concat({tape.constant(a), tape.constant(b)}, 2);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 6}));
  EXPECT_EQ(slice(c, 2, 0, 2).value(), a);
  EXPECT_EQ(slice(c, 2, 2, 6).value(), b);
}

TEST(GatherRows, OutOfRangeIdNamesPosition) {
  Tape tape;
  Var table = tape.constant(Tensor({3, 2}));
  try {
    gather_rows(table, {0, 1, 7, 2}, {2, 2});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, SumOfSquares) {
  auto f = [](Tape&, Var x) { return sum(mul(x, x)); };
  const GradCheckResult r = finite_diff_check(f, Tensor::vector({1.0, 2.0}));
  EXPECT_LE(r.max_rel_error, 1e-7);
}

TEST(GradCheck, SigmoidSum) {
  Rng rng(9);
  auto f = [](Tape&, Var x) { return sum(sigmoid(x)); };
  const GradCheckResult r = finite_diff_check(f, random_tensor({3, 4}, rng));
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(GradCheck, CompositeOps) {
  Rng rng(21);
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  const Tensor r = random_tensor({2, 3}, rng);
  auto f = [&](Tape& t, Var x) {
    Var h = tanh(add_bias(matmul(x, t.constant(w)), t.constant(b)));
    Var p = softmax(scale(h, 1.7));
    Var m = max_over_axis(reshape(transpose(p), {3, 2, 1}), 1).values;
    return add(sum(mul(p, t.constant(r))), sum(m));
  };
  EXPECT_LE(finite_diff_check(f, random_tensor({2, 4}, rng)).max_rel_error, 1e-6);
}

TEST(GradCheck, DetectsWrongGradient) {
  // Overstates the derivative of x² by a factor of two.
  auto f = [](Tape& t, Var x) {
    Tensor out({1}, x.value()[0] * x.value()[0]);
    return t.push(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
      tp.grad_ref(x.id())[0] += g[0] * 4.0 * tp.value(x.id())[0];
    });
  };
  EXPECT_GT(finite_diff_check(f, Tensor::vector({1.5})).max_rel_error, 0.1);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  EXPECT_NE(derive_seed(1, 2), derive_seed(1, 3));
}

TEST(Rng, UniformStaysInRange) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(-0.05, 0.05);
    EXPECT_GE(u, -0.05);
    EXPECT_LT(u, 0.05);
    EXPECT_LT(rng.below(7), 7u);
  }
}

}  // namespace
}  // namespace rcnnhw
