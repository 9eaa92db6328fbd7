// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rcnnhw/layers.hpp"

namespace rcnnhw {
namespace {

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Parameter mat(double v) { return Parameter(Tensor({1, 1}, v)); }
Parameter vec(double v) { return Parameter(Tensor({1}, v)); }

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

EncodedBatch make_batch(std::size_t batch, std::size_t steps, std::vector<std::size_t> ids) {
  EncodedBatch b;
  b.batch = batch;
  b.seq_len = steps;
  b.ids = std::move(ids);
  b.lengths.assign(batch, steps);
  b.labels.assign(batch, 0);
  return b;
}

TEST(Embed, LooksUpRows) {
  Parameter table(Tensor::matrix({{0, 0}, {1, 1}, {2, 3}}));
  Tape tape;
  Var e = embed(make_batch(1, 3, {2, 0, 1}), tape.param(table));
  EXPECT_EQ(e.shape(), (Shape{1, 3, 2}));
  EXPECT_EQ(e.value().at(0, 0, 1), 3.0);
  EXPECT_EQ(e.value().at(0, 2, 0), 1.0);
}

TEST(Embed, UnknownIdThrowsDataError) {
  Parameter table(Tensor({3, 2}));
  Tape tape;
  EXPECT_THROW(embed(make_batch(1, 2, {1, 9}), tape.param(table)), DataError);
}

TEST(Gru, ScalarCellMatchesHandEvaluation) {
  GruParams p;
  p.w_reset = mat(0.3), p.u_reset = mat(-0.7), p.b_reset = vec(0.1);
  p.w_update = mat(-0.4), p.u_update = mat(0.9), p.b_update = vec(0.2);
  p.w_candidate = mat(1.1), p.u_candidate = mat(0.5), p.b_candidate = vec(-0.3);
  const double x = 0.8, h = -0.6;

  const double r = sig(0.3 * x - 0.7 * h + 0.1);
  const double z = sig(-0.4 * x + 0.9 * h + 0.2);
  const double cand = std::tanh(1.1 * x + 0.5 * (r * h) - 0.3);
  const double expected = z * h + (1.0 - z) * cand;

  Tape tape;
  Var out = gru_cell_step(tape.constant(Tensor({1, 1}, x)), tape.constant(Tensor({1, 1}, h)),
                          p.bind(tape));
  EXPECT_NEAR(out.value()[0], expected, 1e-12);
}

TEST(Gru, LargeUpdateBiasCarriesState) {
  Rng rng(4);
  GruParams p = GruParams::init(3, 4, rng);
  p.b_update.value.fill(30.0);
  const Tensor x = random_tensor({2, 3}, rng);
  const Tensor h = random_tensor({2, 4}, rng, -1.0, 1.0);
  Tape tape;
  Var out = gru_cell_step(tape.constant(x), tape.constant(h), p.bind(tape));
  EXPECT_LE(max_abs_diff(out.value(), h), 1e-9);
}

TEST(Lstm, ScalarCellMatchesHandEvaluation) {
  LstmParams p;
  p.input = {mat(0.2), mat(-0.5), vec(0.1)};
  p.forget = {mat(0.7), mat(0.3), vec(1.0)};
  p.output = {mat(-0.6), mat(0.4), vec(0.0)};
  p.candidate = {mat(1.3), mat(-0.2), vec(0.05)};
  const double x = -0.9, h = 0.4, c = 0.25;

  const double i = sig(0.2 * x - 0.5 * h + 0.1);
  const double f = sig(0.7 * x + 0.3 * h + 1.0);
  const double o = sig(-0.6 * x + 0.4 * h);
  const double g = std::tanh(1.3 * x - 0.2 * h + 0.05);
  const double c_new = f * c + i * g;
  const double h_new = o * std::tanh(c_new);

  Tape tape;
  LstmState s = lstm_cell_step(tape.constant(Tensor({1, 1}, x)),
                               {tape.constant(Tensor({1, 1}, h)), tape.constant(Tensor({1, 1}, c))},
                               p.bind(tape));
  EXPECT_NEAR(s.c.value()[0], c_new, 1e-12);
  EXPECT_NEAR(s.h.value()[0], h_new, 1e-12);
}

TEST(RecurrentScan, BackwardDirectionSummarizesSuffix) {
  Rng rng(8);
  GruParams p = GruParams::init(2, 3, rng);
  const Tensor x = random_tensor({1, 4, 2}, rng);
  Tape tape;
  Var xs = tape.constant(x);
  Var bwd = recurrent_scan(xs, GruCell{p.bind(tape), 3}, Direction::backward);

  // Position 1 of the backward scan = forward scan over reversed x[1..3].
  Tensor rev({1, 3, 2});
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 2; ++j) rev.at(0, t, j) = x.at(0, 3 - t, j);
  }
  Var fwd_rev = recurrent_scan(tape.constant(rev), GruCell{p.bind(tape), 3}, Direction::forward);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(bwd.value().at(0, 1, j), fwd_rev.value().at(0, 2, j), 1e-14);
  }
}

TEST(BirnnContext, ConcatenatesBackwardInputForward) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 2, 1}, 5.0));
  Var f = tape.constant(Tensor({1, 2, 2}, 7.0));
  Var b = tape.constant(Tensor({1, 2, 3}, 3.0));
  Var y = birnn_context(x, f, b);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 6}));
  EXPECT_EQ(y.value().at(0, 1, 0), 3.0);
  EXPECT_EQ(y.value().at(0, 1, 2), 3.0);
  EXPECT_EQ(y.value().at(0, 1, 3), 5.0);
  EXPECT_EQ(y.value().at(0, 1, 5), 7.0);
}

TEST(BirnnContext, TimeMismatchThrows) {
  Tape tape;
  EXPECT_THROW(birnn_context(tape.constant(Tensor({1, 2, 1})), tape.constant(Tensor({1, 3, 2})),
                             tape.constant(Tensor({1, 2, 2}))),
               DimensionError);
}

TEST(Highway, ScalarMatchesHandEvaluation) {
  HighwayParams p;
  p.w_transform = mat(0.8), p.b_transform = vec(-0.1);
  p.w_gate = mat(-1.2), p.b_gate = vec(0.4);
  for (double x : {-1.5, 0.02, 0.9}) {
    const double tau = sig(-1.2 * x + 0.4);
    const double expected = tau * std::max(0.0, 0.8 * x - 0.1) + (1.0 - tau) * x;
    Tape tape;
    Var y = highway_forward(tape.constant(Tensor({1, 1, 1}, x)), p.bind(tape));
    EXPECT_NEAR(y.value()[0], expected, 1e-12);
  }
}

TEST(Highway, NegativeGateBiasCarriesInput) {
  Rng rng(12);
  HighwayParams p = HighwayParams::init(5, rng);
  p.b_gate.value.fill(-30.0);
  const Tensor x = random_tensor({2, 3, 5}, rng, -1.0, 1.0);
  Tape tape;
  Var y = highway_forward(tape.constant(x), p.bind(tape));
  EXPECT_LE(max_abs_diff(y.value(), x), 1e-9);
}

TEST(Highway, NonSquareParametersThrow) {
  Rng rng(1);
  HighwayParams p = HighwayParams::init(4, rng);
  Tape tape;
  EXPECT_THROW(highway_forward(tape.constant(Tensor({1, 2, 3})), p.bind(tape)), DimensionError);
}

TEST(Highway, TanhActivationOption) {
  HighwayParams p;
  p.w_transform = mat(0.8), p.b_transform = vec(-0.1);
  p.w_gate = mat(-1.2), p.b_gate = vec(0.4);
  const double x = -0.7;
  const double tau = sig(-1.2 * x + 0.4);
  Tape tape;
  Var y = highway_forward(tape.constant(Tensor({1, 1, 1}, x)), p.bind(tape), Activation::tanh);
  EXPECT_NEAR(y.value()[0], tau * std::tanh(0.8 * x - 0.1) + (1.0 - tau) * x, 1e-12);
}

// Sliding-window dot products written out directly.
Tensor conv_oracle(const Tensor& y, const Tensor& filters, const Tensor& bias, std::size_t h) {
  const std::size_t B = y.dim(0), T = y.dim(1), d = y.dim(2), F = filters.dim(0);
  Tensor out({B, T - h + 1, F});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i + h <= T; ++i) {
      for (std::size_t f = 0; f < F; ++f) {
        double s = bias[f];
        for (std::size_t k = 0; k < h; ++k) {
          for (std::size_t j = 0; j < d; ++j) s += filters.at(f, k * d + j) * y.at(b, i + k, j);
        }
        out.at(b, i, f) = std::max(0.0, s);
      }
    }
  }
  return out;
}

TEST(Conv1d, MatchesSlidingWindowOracle) {
  Rng rng(17);
  for (std::size_t h : {1u, 2u, 3u}) {
    ConvParams p = ConvParams::init(4, h, 3, rng);
    p.bias.value = random_tensor({4}, rng);
    const Tensor y = random_tensor({2, 6, 3}, rng);
    Tape tape;
    Var c = conv1d_forward(tape.constant(y), p.bind(tape));
    ASSERT_EQ(c.shape(), (Shape{2, 7 - h, 4}));
    EXPECT_LE(max_abs_diff(c.value(), conv_oracle(y, p.filters.value, p.bias.value, h)), 1e-12);
  }
}

TEST(Conv1d, SequenceShorterThanWindowThrows) {
  Rng rng(2);
  ConvParams p = ConvParams::init(2, 4, 3, rng);
  Tape tape;
  EXPECT_THROW(conv1d_forward(tape.constant(Tensor({1, 3, 3})), p.bind(tape)), ContractError);
}

TEST(Conv1d, WidthOneWithMaxpoolIsPermutationInvariant) {
  Rng rng(23);
  ConvParams p = ConvParams::init(5, 1, 3, rng);
  const Tensor y = random_tensor({2, 6, 3}, rng);
  std::vector<std::size_t> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  Tensor shuffled(y.shape());
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 0; t < 6; ++t) {
      for (std::size_t j = 0; j < 3; ++j) shuffled.at(b, t, j) = y.at(b, perm[t], j);
    }
  }
  Tape tape;
  Var a = maxpool_over_time(conv1d_forward(tape.constant(y), p.bind(tape)));
  Var c = maxpool_over_time(conv1d_forward(tape.constant(shuffled), p.bind(tape)));
  EXPECT_EQ(a.value(), c.value());
}

TEST(Maxpool, TakesPerFilterMaximum) {
  Tape tape;
  Tensor fm({1, 3, 2}, std::vector<double>{1, 9, 4, 2, 3, 5});
  Var m = maxpool_over_time(tape.constant(fm));
  EXPECT_EQ(m.value(), Tensor({1, 2}, std::vector<double>{4, 9}));
}

TEST(MaskedReduce, IgnoresPadding) {
  Tape tape;
  Tensor x({2, 3, 1}, std::vector<double>{1, 2, 100, 4, 5, 6});
  Var mean = mean_over_time(tape.constant(x), {2, 3});
  Var total = sum_over_time(tape.constant(x), {2, 3});
  EXPECT_DOUBLE_EQ(mean.value()[0], 1.5);
  EXPECT_DOUBLE_EQ(mean.value()[1], 5.0);
  EXPECT_DOUBLE_EQ(total.value()[0], 3.0);
  EXPECT_THROW(mean_over_time(tape.constant(x), {0, 3}), ContractError);
}

TEST(DenseSoftmax, RowsSumToOne) {
  Rng rng(31);
  DenseParams p = DenseParams::init(4, 3, rng);
  Tape tape;
  Var probs = dense_softmax(tape.constant(random_tensor({5, 4}, rng)), p.bind(tape));
  for (std::size_t i = 0; i < 5; ++i) {
    const double s = probs.value().at(i, 0) + probs.value().at(i, 1) + probs.value().at(i, 2);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(DenseSoftmax, SingleClassRejected) {
  Rng rng(1);
  DenseParams p = DenseParams::init(4, 1, rng);
  Tape tape;
  EXPECT_THROW(dense_softmax(tape.constant(Tensor({1, 4})), p.bind(tape)), DimensionError);
}

TEST(Init, GlorotBoundsAndZeroBiases) {
  Rng rng(5);
  GruParams p = GruParams::init(10, 6, rng);
  const double limit = std::sqrt(6.0 / 16.0);
  for (double v : p.w_reset.value.data()) EXPECT_LE(std::abs(v), limit);
  for (double v : p.b_update.value.data()) EXPECT_EQ(v, 0.0);
  EmbeddingParams e = EmbeddingParams::init(20, 4, rng);
  for (double v : e.table.value.data()) EXPECT_LE(std::abs(v), 0.05);
}

}  // namespace
}  // namespace rcnnhw
