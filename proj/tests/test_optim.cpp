// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "rcnnhw/optim.hpp"

namespace rcnnhw {
namespace {

TEST(CrossEntropy, MatchesDirectEvaluation) {
  Tape tape;
  Var probs = tape.constant(Tensor::matrix({{0.9, 0.1}}));
  EXPECT_NEAR(cross_entropy_loss(probs, {0}).value()[0], 0.105361, 1e-6);
  EXPECT_NEAR(cross_entropy_loss(probs, {0}).value()[0], -std::log(0.9), 1e-15);
}

TEST(CrossEntropy, AveragesOverBatch) {
  Tape tape;
  Var probs = tape.constant(Tensor::matrix({{0.9, 0.1}, {0.25, 0.75}}));
  const double expected = 0.5 * (-std::log(0.9) - std::log(0.75));
  EXPECT_NEAR(cross_entropy_loss(probs, {0, 1}).value()[0], expected, 1e-15);
}

TEST(CrossEntropy, ZeroProbabilityStaysFinite) {
  Tape tape;
  Var probs = tape.constant(Tensor::matrix({{1.0, 0.0}}));
  const double loss = cross_entropy_loss(probs, {1}).value()[0];
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, LabelOutOfRangeIsDataError) {
  Tape tape;
  Var probs = tape.constant(Tensor::matrix({{0.5, 0.5}}));
  EXPECT_THROW(cross_entropy_loss(probs, {2}), DataError);
  EXPECT_THROW(cross_entropy_loss(probs, {-1}), DataError);
  EXPECT_THROW(cross_entropy_loss(probs, {0, 1}), DimensionError);
}

TEST(RmsProp, FirstStepByHand) {
  Tensor p = Tensor::vector({1.0});
  Tensor cache;
  rmsprop_step(p, Tensor::vector({1.0}), cache, {});
  EXPECT_NEAR(cache[0], 0.1, 1e-15);
  EXPECT_NEAR(p[0], 0.996838, 1e-6);
  EXPECT_NEAR(p[0], 1.0 - 1e-3 / (std::sqrt(0.1) + 1e-8), 1e-15);
}

TEST(RmsProp, ConvergesOnQuadratic) {
  Tensor p = Tensor::vector({5.0});
  Tensor cache;
  for (int i = 0; i < 500; ++i) {
    rmsprop_step(p, Tensor::vector({2.0 * p[0]}), cache, {0.05, 0.9, 1e-8});
  }
  EXPECT_LT(std::abs(p[0]), 0.1);
}

TEST(Adam, FirstStepMagnitudeEqualsLearningRate) {
  for (double g : {0.1, 1.0, 1e3, -5.0}) {
    Tensor p = Tensor::vector({2.0});
    AdamMoments s;
    adam_step(p, Tensor::vector({g}), s, 1, {});
    EXPECT_NEAR(std::abs(p[0] - 2.0), 1e-3, 1e-9) << "g=" << g;
  }
}

TEST(Adam, StepCountStartsAtOne) {
  Tensor p = Tensor::vector({1.0});
  AdamMoments s;
  EXPECT_THROW(adam_step(p, Tensor::vector({1.0}), s, 0, {}), ContractError);
}

TEST(Adadelta, FirstStepRegression) {
  Tensor p = Tensor::vector({1.0});
  AdadeltaAccumulators s;
  adadelta_step(p, Tensor::vector({1.0}), s, {});
  EXPECT_NEAR(p[0], 0.9955279087656892, 1e-15);
  EXPECT_NEAR(s.sq_grad[0], 0.05, 1e-15);
}

TEST(Clip, ScalesToMaxNorm) {
  Tensor a = Tensor::vector({3.0}), b = Tensor::vector({4.0});
  Tensor* grads[] = {&a, &b};
  EXPECT_DOUBLE_EQ(clip_gradients(grads, 1.0), 5.0);
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(b[0], 0.8, 1e-15);
}

TEST(Clip, BelowThresholdUntouched) {
  Tensor a = Tensor::vector({0.3, 0.4});
  Tensor* grads[] = {&a};
  EXPECT_DOUBLE_EQ(clip_gradients(grads, 1.0), 0.5);
  EXPECT_EQ(a, Tensor::vector({0.3, 0.4}));
}

TEST(Optimizer, ParseKinds) {
  EXPECT_EQ(parse_optimizer_kind("rmsprop"), OptimizerKind::rmsprop);
  EXPECT_EQ(parse_optimizer_kind("adam"), OptimizerKind::adam);
  EXPECT_EQ(parse_optimizer_kind("adadelta"), OptimizerKind::adadelta);
  EXPECT_THROW(parse_optimizer_kind("sgd"), ConfigError);
}

TEST(Optimizer, DriverMatchesPerTensorRule) {
  for (OptimizerKind k : {OptimizerKind::rmsprop, OptimizerKind::adam, OptimizerKind::adadelta}) {
    Parameter p(Tensor::vector({1.0, -2.0}));
    std::vector<NamedParameter> params{{"p", &p}};
    OptimizerConfig cfg;
    cfg.kind = k;
    Optimizer opt(cfg);
    Tensor ref = p.value;
    Tensor a;
    AdamMoments m;
    AdadeltaAccumulators acc;
    for (std::size_t step = 1; step <= 3; ++step) {
      const Tensor g = Tensor::vector({0.5 * static_cast<double>(step), -1.0});
      p.grad = g;
      opt.step(params);
      switch (k) {
        case OptimizerKind::rmsprop: rmsprop_step(ref, g, a, {}); break;
        case OptimizerKind::adam: adam_step(ref, g, m, step, {}); break;
        case OptimizerKind::adadelta: adadelta_step(ref, g, acc, {}); break;
      }
    }
    EXPECT_EQ(p.value, ref) << to_string(k);
  }
}

TEST(Optimizer, DefaultsDependOnKind) {
  OptimizerConfig c;
  EXPECT_DOUBLE_EQ(c.resolved_lr(), 1e-3);
  EXPECT_DOUBLE_EQ(c.resolved_rho(), 0.9);
  c.kind = OptimizerKind::adadelta;
  EXPECT_DOUBLE_EQ(c.resolved_lr(), 1.0);
  EXPECT_DOUBLE_EQ(c.resolved_rho(), 0.95);
  EXPECT_DOUBLE_EQ(c.resolved_eps(), 1e-6);
}

}  // namespace
}  // namespace rcnnhw
