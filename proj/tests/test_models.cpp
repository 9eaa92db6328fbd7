// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rcnnhw/gradcheck_suite.hpp"
#include "rcnnhw/models.hpp"
#include "rcnnhw/optim.hpp"

namespace rcnnhw {
namespace {

using Vec = std::vector<double>;

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// x·W for a row vector x and W stored [in × out].
Vec row_times(const Vec& x, const Tensor& w) {
  Vec out(w.dim(1), 0.0);
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    for (std::size_t j = 0; j < w.dim(1); ++j) out[j] += x[i] * w.at(i, j);
  }
  return out;
}

Vec gru_step(const Vec& x, const Vec& h, const GruParams& p) {
  const Vec xr = row_times(x, p.w_reset.value), hr = row_times(h, p.u_reset.value);
  const Vec xz = row_times(x, p.w_update.value), hz = row_times(h, p.u_update.value);
  const std::size_t n = h.size();
  Vec r(n), z(n), rh(n), out(n);
  for (std::size_t j = 0; j < n; ++j) {
    r[j] = sig(xr[j] + hr[j] + p.b_reset.value[j]);
    z[j] = sig(xz[j] + hz[j] + p.b_update.value[j]);
    rh[j] = r[j] * h[j];
  }
  const Vec xc = row_times(x, p.w_candidate.value), hc = row_times(rh, p.u_candidate.value);
  for (std::size_t j = 0; j < n; ++j) {
    const double cand = std::tanh(xc[j] + hc[j] + p.b_candidate.value[j]);
    out[j] = z[j] * h[j] + (1.0 - z[j]) * cand;
  }
  return out;
}

// Position-by-position evaluation of one example through the RCNN-HW stack.
Vec oracle_rcnn_hw(const Model& m, const std::vector<std::size_t>& ids) {
  const std::size_t T = ids.size(), e = m.spec.embed_dim, h = m.spec.hidden_dim;
  std::vector<Vec> x(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < e; ++j) x[t].push_back(m.embedding.table.value.at(ids[t], j));
  }
  std::vector<Vec> fwd(T), bwd(T);
  Vec state(h, 0.0);
  for (std::size_t t = 0; t < T; ++t) fwd[t] = state = gru_step(x[t], state, *m.gru_fwd);
  state.assign(h, 0.0);
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t t = T - 1 - k;
    bwd[t] = state = gru_step(x[t], state, *m.gru_bwd);
  }
  const std::size_t F = m.spec.num_filters;
  Vec pooled(F, -INFINITY);
  for (std::size_t t = 0; t < T; ++t) {
    Vec y = bwd[t];
    y.insert(y.end(), x[t].begin(), x[t].end());
    y.insert(y.end(), fwd[t].begin(), fwd[t].end());
    for (const HighwayParams& hw : m.highways) {
      const Vec a = row_times(y, hw.w_transform.value);
      const Vec g = row_times(y, hw.w_gate.value);
      Vec next(y.size());
      for (std::size_t j = 0; j < y.size(); ++j) {
        const double tau = sig(g[j] + hw.b_gate.value[j]);
        next[j] = tau * std::max(0.0, a[j] + hw.b_transform.value[j]) + (1.0 - tau) * y[j];
      }
      y = next;
    }
    const ConvParams& c = m.convs.front();
    for (std::size_t f = 0; f < F; ++f) {
      double s = c.bias.value[f];
      for (std::size_t j = 0; j < y.size(); ++j) s += c.filters.value.at(f, j) * y[j];
      pooled[f] = std::max(pooled[f], std::max(0.0, s));
    }
  }
  Vec logits = row_times(pooled, m.head.weight.value);
  double mx = -INFINITY;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    logits[k] += m.head.bias.value[k];
    mx = std::max(mx, logits[k]);
  }
  double z = 0.0;
  for (double& v : logits) z += (v = std::exp(v - mx));
  for (double& v : logits) v /= z;
  return logits;
}

EncodedBatch batch_of(std::size_t steps, const std::vector<std::vector<std::size_t>>& rows) {
  EncodedBatch b;
  b.batch = rows.size();
  b.seq_len = steps;
  for (const auto& r : rows) b.ids.insert(b.ids.end(), r.begin(), r.end());
  b.lengths.assign(rows.size(), steps);
  b.labels.assign(rows.size(), 0);
  return b;
}

TEST(ModelKind, NamesRoundTrip) {
  for (ModelKind k : kAllModelKinds) EXPECT_EQ(parse_model_kind(to_string(k)), k);
}

TEST(ModelKind, UnknownKindListsValidOnes) {
  try {
    parse_model_kind("transformer");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rcnn-hw"), std::string::npos);
  }
}

TEST(ParamCount, CowExample) {
  ModelSpec s;
  s.kind = ModelKind::cow;
  s.vocab_size = 10;
  s.embed_dim = 4;
  EXPECT_EQ(count_params(s), 50u);
  EXPECT_EQ(build_model(s, 1).parameter_count(), 50u);
}

TEST(ParamCount, GruCellExample) {
  Rng rng(1);
  GruParams p = GruParams::init(2, 3, rng);
  std::size_t n = 0;
  p.for_each([&](const std::string&, const Parameter& q) { n += q.value.size(); });
  EXPECT_EQ(n, 54u);
}

TEST(ParamCount, HighwayExample) {
  Rng rng(1);
  HighwayParams p = HighwayParams::init(4, rng);
  std::size_t n = 0;
  p.for_each([&](const std::string&, const Parameter& q) { n += q.value.size(); });
  EXPECT_EQ(n, 40u);
}

TEST(ParamCount, ClosedFormMatchesAllocationForEveryKind) {
  for (ModelKind k : kAllModelKinds) {
    ModelSpec s;
    s.kind = k;
    s.vocab_size = 30;
    s.embed_dim = 6;
    s.hidden_dim = 5;
    s.num_filters = 7;
    s.seq_len = 8;
    EXPECT_EQ(build_model(s, 3).parameter_count(), count_params(s)) << to_string(k);
  }
  ModelSpec mlp;
  mlp.vocab_size = 30, mlp.embed_dim = 6, mlp.hidden_dim = 5, mlp.num_filters = 7;
  mlp.mlp_instead_of_highway = true;
  EXPECT_EQ(build_model(mlp, 3).parameter_count(), count_params(mlp));
  mlp.mlp_instead_of_highway = false;
  mlp.highway_layers = 2;
  EXPECT_EQ(build_model(mlp, 3).parameter_count(), count_params(mlp));
}

TEST(RcnnHw, DefaultDimensions) {
  ModelSpec s;
  s.vocab_size = 50;
  EXPECT_EQ(s.context_width(), 164u);
  Model m = build_model(s, 1);
  ASSERT_EQ(m.highways.size(), 1u);
  EXPECT_EQ(m.highways[0].width(), 164u);
  EXPECT_EQ(m.convs.front().filters.value.shape(), (Shape{256, 164}));
}

TEST(RcnnHw, TinyModelMatchesStepwiseOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Model m = build_model(tiny_rcnn_hw_spec(), seed);
    Rng rng(seed + 100);
    for (const NamedParameter& np : m.parameters()) {
      for (double& v : np.param->value.data()) v = rng.uniform(-1.0, 1.0);
    }
    const std::vector<std::vector<std::size_t>> rows{{2, 4, 1}, {3, 3, 0}};
    const Tensor probs = predict(m, batch_of(3, rows));
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const Vec expected = oracle_rcnn_hw(m, rows[b]);
      for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(probs.at(b, k), expected[k], 1e-10);
    }
  }
}

TEST(Rcnn, ZeroRecurrentWeightsReduceToEmbeddingPathway) {
  ModelSpec s;
  s.kind = ModelKind::rcnn;
  s.vocab_size = 12;
  s.embed_dim = 4;
  s.hidden_dim = 3;
  s.num_filters = 6;
  s.seq_len = 5;
  Model m = build_model(s, 9);
  for (GruParams* g : {&*m.gru_fwd, &*m.gru_bwd}) {
    g->for_each([](const std::string&, const Parameter& p) {
      const_cast<Parameter&>(p).value.fill(0.0);
    });
  }
  const EncodedBatch batch = batch_of(5, {{2, 5, 7, 1, 11}, {3, 3, 9, 4, 0}});
  const Tensor probs = predict(m, batch);

  // conv over [0 ‖ x ‖ 0] built without any recurrent layer.
  Tape tape(false);
  Var x = embed(batch, tape.param(m.embedding.table));
  Var zeros = tape.constant(Tensor({2, 5, 3}));
  Var y = concat({zeros, x, zeros}, 2);
  Var pooled = maxpool_over_time(conv1d_forward(y, m.convs.front().bind(tape)));
  Var direct = dense_softmax(pooled, m.head.bind(tape));
  EXPECT_LE(max_abs_diff(probs, direct.value()), 1e-9);
}

TEST(Models, EveryKindYieldsDistributionsAndFiniteGradients) {
  for (ModelKind k : kAllModelKinds) {
    ModelSpec s;
    s.kind = k;
    s.vocab_size = 20;
    s.embed_dim = 5;
    s.hidden_dim = 4;
    s.num_filters = 3;
    s.cnn_windows = {2, 3};
    s.seq_len = 6;
    Model m = build_model(s, 4);
    EncodedBatch b = batch_of(6, {{2, 3, 4, 5, 6, 7}, {8, 9, 10, 0, 0, 0}});
    b.lengths = {6, 3};
    b.labels = {0, 1};
    m.zero_grad();
    Tape tape;
    Var probs = forward(tape, m, b);
    ASSERT_EQ(probs.shape(), (Shape{2, 2})) << to_string(k);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_NEAR(probs.value().at(i, 0) + probs.value().at(i, 1), 1.0, 1e-12);
    }
    tape.backward(cross_entropy_loss(probs, b.labels));
    for (const NamedParameter& np : m.parameters()) {
      np.param->zero_grad_if_missing();
      EXPECT_TRUE(np.param->grad.all_finite()) << np.name;
    }
  }
}

TEST(Models, SeqLenMismatchThrows) {
  ModelSpec s;
  s.kind = ModelKind::cow;
  s.vocab_size = 10;
  s.embed_dim = 3;
  s.seq_len = 4;
  Model m = build_model(s, 1);
  EXPECT_THROW(predict(m, batch_of(3, {{1, 2, 3}})), ContractError);
}

TEST(Models, SameSeedSameParameters) {
  ModelSpec s;
  s.vocab_size = 10;
  s.embed_dim = 3;
  s.hidden_dim = 2;
  s.num_filters = 4;
  Model a = build_model(s, 77), b = build_model(s, 77), c = build_model(s, 78);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].param->value, pb[i].param->value);
    differs = differs || !(pa[i].param->value == pc[i].param->value);
  }
  EXPECT_TRUE(differs);
}

TEST(Models, InvalidSpecRejected) {
  ModelSpec s;
  s.embed_dim = 0;
  EXPECT_THROW(build_model(s, 1), ConfigError);
  ModelSpec c;
  c.num_classes = 1;
  EXPECT_THROW(build_model(c, 1), ConfigError);
}

TEST(ModelGradcheck, TinyRcnnHwEveryParameter) {
  const GradCheckReport r = run_model_gradchecks(3);
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(r.rows.size(), build_model(tiny_rcnn_hw_spec(), 0).parameters().size());
}

}  // namespace
}  // namespace rcnnhw
