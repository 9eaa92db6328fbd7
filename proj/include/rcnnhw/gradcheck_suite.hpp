// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "rcnnhw/gradcheck.hpp"
#include "rcnnhw/layers.hpp"
#include "rcnnhw/models.hpp"
#include "rcnnhw/optim.hpp"

namespace rcnnhw {

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr std::size_t kGradCheckSeeds = 5;

struct GradCheckRow {
  std::string target;
  std::string wrt;
  double max_rel_error = 0.0;
  bool passed() const { return max_rel_error <= kGradCheckTolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;

  bool passed() const {
    for (const auto& r : rows) {
      if (!r.passed()) return false;
    }
    return !rows.empty();
  }

  double max_error(const std::string& target) const {
    double m = 0.0;
    for (const auto& r : rows) {
      if (r.target == target) m = std::max(m, r.max_rel_error);
    }
    return m;
  }

  void print(std::ostream& os) const {
    os << std::left << std::setw(22) << "target" << std::setw(18) << "wrt"
       << "max_rel_error  status\n";
    for (const auto& r : rows) {
      os << std::left << std::setw(22) << r.target << std::setw(18) << r.wrt
         << std::scientific << std::setprecision(3) << r.max_rel_error << "      "
         << (r.passed() ? "ok" : "FAIL") << '\n';
    }
    os << std::defaultfloat;
  }
};

namespace gradcheck_detail {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(out ⊙ w) for fixed random w, so every output coordinate matters with
/// a distinct weight.
inline Var project(Var out, const Tensor& w) {
  return sum(mul(out, out.tape().constant(w)));
}

template <typename Params>
void randomize(Params& p, Rng& rng, double lo = -1.0, double hi = 1.0) {
  p.for_each([&](const std::string&, const Parameter& param) {
    Parameter& m = const_cast<Parameter&>(param);
    for (double& v : m.value.data()) v = rng.uniform(lo, hi);
  });
}

/// Accumulates the maximum error per (target, wrt) over seeds.
class Collector {
 public:
  explicit Collector(GradCheckReport& report) : report_(report) {}

  void add(const std::string& target, const std::string& wrt, double err) {
    for (auto& r : report_.rows) {
      if (r.target == target && r.wrt == wrt) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        return;
      }
    }
    report_.rows.push_back({target, wrt, err});
  }

 private:
  GradCheckReport& report_;
};

/// tanh with a deliberately wrong derivative (1 − t instead of 1 − t²).
inline Var faulty_tanh(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::tanh(v);
  Tape& tape = x.tape();
  const std::size_t self = tape.size();
  return tape.push(std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * (1.0 - y[i]);
  });
}

}  // namespace gradcheck_detail

/// Finite-difference checks of every layer against inputs and parameters,
/// `kGradCheckSeeds` random draws each. Inputs are drawn from [−2, 2] and
/// parameters from [−1, 1] so saturated gates do not reduce the gradient to
/// roundoff.
/// `inject_fault` adds a target with a broken backward rule.
inline GradCheckReport run_layer_gradchecks(std::uint64_t seed, bool inject_fault = false) {
  using namespace gradcheck_detail;
  GradCheckReport report;
  Collector col(report);
  const std::size_t B = 2, T = 4;

  for (std::size_t s = 0; s < kGradCheckSeeds; ++s) {
    Rng rng(derive_seed(seed, s));

    // embed
    {
      EncodedBatch batch;
      batch.batch = B;
      batch.seq_len = T;
      for (std::size_t i = 0; i < B * T; ++i) batch.ids.push_back(rng.below(7));
      batch.lengths.assign(B, T);
      Parameter table(random_tensor({7, 3}, rng));
      const Tensor w = random_tensor({B, T, 3}, rng);
      col.add("embed", "table", finite_diff_check(
                                    [&](Tape& t) { return project(embed(batch, t.param(table)), w); },
                                    table).max_rel_error);
    }

    // gru_cell_step
    {
      GruParams p = GruParams::init(3, 4, rng);
      randomize(p, rng);
      const Tensor x = random_tensor({B, 3}, rng);
      const Tensor h = random_tensor({B, 4}, rng);
      const Tensor w = random_tensor({B, 4}, rng);
      col.add("gru_cell_step", "x", finite_diff_check([&](Tape& t, Var v) {
                return project(gru_cell_step(v, t.constant(h), p.bind(t)), w);
              }, x).max_rel_error);
      col.add("gru_cell_step", "h_prev", finite_diff_check([&](Tape& t, Var v) {
                return project(gru_cell_step(t.constant(x), v, p.bind(t)), w);
              }, h).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add("gru_cell_step", name,
                finite_diff_check([&](Tape& t) {
                  return project(gru_cell_step(t.constant(x), t.constant(h), p.bind(t)), w);
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // lstm_cell_step
    {
      LstmParams p = LstmParams::init(3, 4, rng);
      randomize(p, rng);
      const Tensor x = random_tensor({B, 3}, rng);
      const Tensor h = random_tensor({B, 4}, rng);
      const Tensor c = random_tensor({B, 4}, rng);
      const Tensor wh = random_tensor({B, 4}, rng);
      const Tensor wc = random_tensor({B, 4}, rng);
      auto obj = [&](Tape& t, Var xv, Var hv, Var cv) {
        LstmState st = lstm_cell_step(xv, {hv, cv}, p.bind(t));
        return add(project(st.h, wh), project(st.c, wc));
      };
      col.add("lstm_cell_step", "x", finite_diff_check([&](Tape& t, Var v) {
                return obj(t, v, t.constant(h), t.constant(c));
              }, x).max_rel_error);
      col.add("lstm_cell_step", "h_prev", finite_diff_check([&](Tape& t, Var v) {
                return obj(t, t.constant(x), v, t.constant(c));
              }, h).max_rel_error);
      col.add("lstm_cell_step", "c_prev", finite_diff_check([&](Tape& t, Var v) {
                return obj(t, t.constant(x), t.constant(h), v);
              }, c).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add("lstm_cell_step", name, finite_diff_check([&](Tape& t) {
                  return obj(t, t.constant(x), t.constant(h), t.constant(c));
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // recurrent_scan (GRU, both directions) feeding birnn_context
    {
      GruParams pf = GruParams::init(3, 2, rng);
      GruParams pb = GruParams::init(3, 2, rng);
      randomize(pf, rng, -1.0, 1.0);
      randomize(pb, rng, -1.0, 1.0);
      const Tensor x = random_tensor({B, T, 3}, rng);
      const Tensor w = random_tensor({B, T, 7}, rng);
      auto obj = [&](Tape& t, Var xv) {
        Var f = recurrent_scan(xv, GruCell{pf.bind(t), 2}, Direction::forward);
        Var b = recurrent_scan(xv, GruCell{pb.bind(t), 2}, Direction::backward);
        return project(birnn_context(xv, f, b), w);
      };
      col.add("recurrent_scan", "x", finite_diff_check(obj, x).max_rel_error);
      pb.for_each([&](const std::string& name, const Parameter& param) {
        col.add("recurrent_scan", "bwd." + name, finite_diff_check([&](Tape& t) {
                  return obj(t, t.constant(x));
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // birnn_context
    {
      const Tensor x = random_tensor({B, T, 3}, rng);
      const Tensor f = random_tensor({B, T, 2}, rng);
      const Tensor b = random_tensor({B, T, 2}, rng);
      const Tensor w = random_tensor({B, T, 7}, rng);
      col.add("birnn_context", "x", finite_diff_check([&](Tape& t, Var v) {
                return project(birnn_context(v, t.constant(f), t.constant(b)), w);
              }, x).max_rel_error);
      col.add("birnn_context", "fwd", finite_diff_check([&](Tape& t, Var v) {
                return project(birnn_context(t.constant(x), v, t.constant(b)), w);
              }, f).max_rel_error);
      col.add("birnn_context", "bwd", finite_diff_check([&](Tape& t, Var v) {
                return project(birnn_context(t.constant(x), t.constant(f), v), w);
              }, b).max_rel_error);
    }

    // highway_forward
    {
      HighwayParams p = HighwayParams::init(5, rng);
      randomize(p, rng);
      const Tensor x = random_tensor({B, T, 5}, rng);
      const Tensor w = random_tensor({B, T, 5}, rng);
      col.add("highway_forward", "x", finite_diff_check([&](Tape& t, Var v) {
                return project(highway_forward(v, p.bind(t)), w);
              }, x).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add("highway_forward", name, finite_diff_check([&](Tape& t) {
                  return project(highway_forward(t.constant(x), p.bind(t)), w);
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // conv1d_forward, window 1 and 2
    for (std::size_t window : {1u, 2u}) {
      ConvParams p = ConvParams::init(3, window, 4, rng);
      randomize(p, rng);
      const Tensor y = random_tensor({B, T, 4}, rng);
      const Tensor w = random_tensor({B, T - window + 1, 3}, rng);
      const std::string target = "conv1d_forward/h=" + std::to_string(window);
      col.add(target, "y", finite_diff_check([&](Tape& t, Var v) {
                return project(conv1d_forward(v, p.bind(t)), w);
              }, y).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add(target, name, finite_diff_check([&](Tape& t) {
                  return project(conv1d_forward(t.constant(y), p.bind(t)), w);
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // maxpool_over_time
    {
      const Tensor fm = random_tensor({B, T, 3}, rng);
      const Tensor w = random_tensor({B, 3}, rng);
      col.add("maxpool_over_time", "feature_map", finite_diff_check([&](Tape&, Var v) {
                return project(maxpool_over_time(v), w);
              }, fm).max_rel_error);
    }

    // mean/sum over time
    {
      const Tensor x = random_tensor({B, T, 3}, rng);
      const Tensor w = random_tensor({B, 3}, rng);
      const std::vector<std::size_t> lengths{T, T - 1};
      col.add("mean_over_time", "x", finite_diff_check([&](Tape&, Var v) {
                return project(mean_over_time(v, lengths), w);
              }, x).max_rel_error);
      col.add("sum_over_time", "x", finite_diff_check([&](Tape&, Var v) {
                return project(sum_over_time(v, lengths), w);
              }, x).max_rel_error);
    }

    // dense_softmax
    {
      DenseParams p = DenseParams::init(4, 3, rng);
      randomize(p, rng);
      const Tensor x = random_tensor({B, 4}, rng);
      const Tensor w = random_tensor({B, 3}, rng);
      col.add("dense_softmax", "x", finite_diff_check([&](Tape& t, Var v) {
                return project(dense_softmax(v, p.bind(t)), w);
              }, x).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add("dense_softmax", name, finite_diff_check([&](Tape& t) {
                  return project(dense_softmax(t.constant(x), p.bind(t)), w);
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    // softmax head + cross-entropy
    {
      DenseParams p = DenseParams::init(4, 2, rng);
      randomize(p, rng);
      const Tensor x = random_tensor({B, 4}, rng);
      const std::vector<int> labels{static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))};
      col.add("cross_entropy", "x", finite_diff_check([&](Tape& t, Var v) {
                return cross_entropy_loss(dense_softmax(v, p.bind(t)), labels);
              }, x).max_rel_error);
      p.for_each([&](const std::string& name, const Parameter& param) {
        col.add("cross_entropy", name, finite_diff_check([&](Tape& t) {
                  return cross_entropy_loss(dense_softmax(t.constant(x), p.bind(t)), labels);
                }, const_cast<Parameter&>(param)).max_rel_error);
      });
    }

    if (inject_fault) {
      const Tensor x = random_tensor({B, 3}, rng);
      const Tensor w = random_tensor({B, 3}, rng);
      col.add("injected_fault", "x", finite_diff_check([&](Tape&, Var v) {
                return project(gradcheck_detail::faulty_tanh(v), w);
              }, x).max_rel_error);
    }
  }
  return report;
}

/// The tiny end-to-end network: vocab 5, embed 2, hidden 1, 2 filters, T = 3,
/// one highway block.
inline ModelSpec tiny_rcnn_hw_spec() {
  ModelSpec s;
  s.kind = ModelKind::rcnn_hw;
  s.vocab_size = 5;
  s.embed_dim = 2;
  s.hidden_dim = 1;
  s.num_filters = 2;
  s.highway_layers = 1;
  s.seq_len = 3;
  return s;
}

/// Cross-entropy of the tiny RCNN-HW, checked against every parameter
/// tensor for `kGradCheckSeeds` random parameter draws in [−1, 1].
inline GradCheckReport run_model_gradchecks(std::uint64_t seed) {
  using namespace gradcheck_detail;
  GradCheckReport report;
  Collector col(report);
  for (std::size_t s = 0; s < kGradCheckSeeds; ++s) {
    Rng rng(derive_seed(seed, 100 + s));
    Model m = build_model(tiny_rcnn_hw_spec(), rng.next());
    for (const NamedParameter& np : m.parameters()) {
      for (double& v : np.param->value.data()) v = rng.uniform(-1.0, 1.0);
    }
    EncodedBatch batch;
    batch.batch = 2;
    batch.seq_len = 3;
    for (std::size_t i = 0; i < 6; ++i) batch.ids.push_back(rng.below(5));
    batch.lengths = {3, 3};
    batch.labels = {0, 1};
    for (const NamedParameter& np : m.parameters()) {
      col.add("rcnn_hw_tiny", np.name, finite_diff_check([&](Tape& t) {
                return cross_entropy_loss(forward(t, m, batch), batch.labels);
              }, *np.param).max_rel_error);
    }
  }
  return report;
}

}  // namespace rcnnhw
