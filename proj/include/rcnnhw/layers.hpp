// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rcnnhw/autodiff.hpp"
#include "rcnnhw/batch.hpp"
#include "rcnnhw/random.hpp"

namespace rcnnhw {

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
inline Parameter glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return Parameter(std::move(t));
}

inline Parameter zeros(std::size_t n) { return Parameter(Tensor({n})); }

inline Parameter uniform_table(std::size_t rows, std::size_t cols, double limit, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return Parameter(std::move(t));
}

// ---------------------------------------------------------------------------
// Parameter containers
//
// Each container owns Parameters and has a matching *Vars struct holding the
// same tensors bound to a tape. Layer functions take the Vars form, so a
// gradient check can substitute any single parameter with a free leaf.
// ---------------------------------------------------------------------------

struct EmbeddingParams {
  Parameter table;  // [vocab_size × embed_dim]; row 0 = PAD, row 1 = UNK

  static EmbeddingParams init(std::size_t vocab_size, std::size_t embed_dim, Rng& rng) {
    if (vocab_size < 2) throw ConfigError("vocabulary must include PAD and UNK");
    return {uniform_table(vocab_size, embed_dim, 0.05, rng)};
  }
  std::size_t vocab_size() const { return table.value.dim(0); }
  std::size_t embed_dim() const { return table.value.dim(1); }
};

struct GruVars {
  Var w_reset, w_update, w_candidate;  // [in × hidden]
  Var u_reset, u_update, u_candidate;  // [hidden × hidden]
  Var b_reset, b_update, b_candidate;  // [hidden]
};

struct GruParams {
  Parameter w_reset, w_update, w_candidate;
  Parameter u_reset, u_update, u_candidate;
  Parameter b_reset, b_update, b_candidate;

  static GruParams init(std::size_t in_dim, std::size_t hidden, Rng& rng) {
    GruParams p;
    p.w_reset = glorot_uniform(in_dim, hidden, rng);
    p.w_update = glorot_uniform(in_dim, hidden, rng);
    p.w_candidate = glorot_uniform(in_dim, hidden, rng);
    p.u_reset = glorot_uniform(hidden, hidden, rng);
    p.u_update = glorot_uniform(hidden, hidden, rng);
    p.u_candidate = glorot_uniform(hidden, hidden, rng);
    p.b_reset = zeros(hidden);
    p.b_update = zeros(hidden);
    p.b_candidate = zeros(hidden);
    return p;
  }

  std::size_t in_dim() const { return w_reset.value.dim(0); }
  std::size_t hidden() const { return w_reset.value.dim(1); }

  GruVars bind(Tape& t) const {
    return {t.param(w_reset), t.param(w_update), t.param(w_candidate),
            t.param(u_reset), t.param(u_update), t.param(u_candidate),
            t.param(b_reset), t.param(b_update), t.param(b_candidate)};
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("w_reset", w_reset), fn("w_update", w_update), fn("w_candidate", w_candidate);
    fn("u_reset", u_reset), fn("u_update", u_update), fn("u_candidate", u_candidate);
    fn("b_reset", b_reset), fn("b_update", b_update), fn("b_candidate", b_candidate);
  }
};

struct LstmGateVars {
  Var w, u, b;
};

struct LstmVars {
  LstmGateVars input, forget, output, candidate;
};

struct LstmGate {
  Parameter w;  // [in × hidden]
  Parameter u;  // [hidden × hidden]
  Parameter b;  // [hidden]

  static LstmGate init(std::size_t in_dim, std::size_t hidden, Rng& rng) {
    LstmGate g;
    g.w = glorot_uniform(in_dim, hidden, rng);
    g.u = glorot_uniform(hidden, hidden, rng);
    g.b = zeros(hidden);
    return g;
  }
  LstmGateVars bind(Tape& t) const { return {t.param(w), t.param(u), t.param(b)}; }
};

struct LstmParams {
  LstmGate input, forget, output, candidate;

  static LstmParams init(std::size_t in_dim, std::size_t hidden, Rng& rng) {
    LstmParams p;
    p.input = LstmGate::init(in_dim, hidden, rng);
    p.forget = LstmGate::init(in_dim, hidden, rng);
    p.output = LstmGate::init(in_dim, hidden, rng);
    p.candidate = LstmGate::init(in_dim, hidden, rng);
    return p;
  }

  std::size_t in_dim() const { return input.w.value.dim(0); }
  std::size_t hidden() const { return input.w.value.dim(1); }

  LstmVars bind(Tape& t) const {
    return {input.bind(t), forget.bind(t), output.bind(t), candidate.bind(t)};
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const std::pair<const char*, const LstmGate*> gates[] = {
        {"input", &input}, {"forget", &forget}, {"output", &output}, {"candidate", &candidate}};
    for (const auto& [name, g] : gates) {
      fn(std::string("w_") + name, g->w);
      fn(std::string("u_") + name, g->u);
      fn(std::string("b_") + name, g->b);
    }
  }
};

struct HighwayVars {
  Var w_transform, b_transform;  // W_H, b_H
  Var w_gate, b_gate;            // W_τ, b_τ
};

/// Square highway block: the carry path needs input width == output width.
struct HighwayParams {
  Parameter w_transform, b_transform;
  Parameter w_gate, b_gate;

  static HighwayParams init(std::size_t width, Rng& rng) {
    HighwayParams p;
    p.w_transform = glorot_uniform(width, width, rng);
    p.b_transform = zeros(width);
    p.w_gate = glorot_uniform(width, width, rng);
    p.b_gate = zeros(width);
    return p;
  }

  std::size_t width() const { return w_transform.value.dim(0); }

  HighwayVars bind(Tape& t) const {
    return {t.param(w_transform), t.param(b_transform), t.param(w_gate), t.param(b_gate)};
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("w_transform", w_transform), fn("b_transform", b_transform);
    fn("w_gate", w_gate), fn("b_gate", b_gate);
  }
};

struct ConvVars {
  Var filters;  // [num_filters × (window·d)]
  Var bias;     // [num_filters]
  std::size_t window = 1;
};

struct ConvParams {
  Parameter filters;
  Parameter bias;
  std::size_t window = 1;

  static ConvParams init(std::size_t num_filters, std::size_t window, std::size_t in_dim,
                         Rng& rng) {
    if (window < 1) throw ConfigError("convolution window must be >= 1");
    ConvParams p;
    // Drawn as [fan_in × filters] and stored transposed.
    Parameter w = glorot_uniform(window * in_dim, num_filters, rng);
    Tensor stored({num_filters, window * in_dim});
    for (std::size_t i = 0; i < window * in_dim; ++i) {
      for (std::size_t f = 0; f < num_filters; ++f) {
        stored.at(f, i) = w.value.at(i, f);
      }
    }
    p.filters = Parameter(std::move(stored));
    p.bias = zeros(num_filters);
    p.window = window;
    return p;
  }

  std::size_t num_filters() const { return filters.value.dim(0); }
  std::size_t in_dim() const { return filters.value.dim(1) / window; }

  ConvVars bind(Tape& t) const { return {t.param(filters), t.param(bias), window}; }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("filters", filters), fn("bias", bias);
  }
};

struct DenseVars {
  Var weight, bias;
};

/// Affine map x·W + b, used for the softmax head and the MLP ablation block.
struct DenseParams {
  Parameter weight;  // [in × out]
  Parameter bias;    // [out]

  static DenseParams init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    return {glorot_uniform(in_dim, out_dim, rng), zeros(out_dim)};
  }
  DenseVars bind(Tape& t) const { return {t.param(weight), t.param(bias)}; }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn("weight", weight), fn("bias", bias);
  }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Token ids → [batch × seq_len × embed_dim].
inline Var embed(const EncodedBatch& batch, Var table) {
  batch.validate();
  return gather_rows(table, batch.ids, {batch.batch, batch.seq_len});
}

/// One GRU step with the update gate weighting the previous state:
///   r = σ(x·W_r + h·U_r + b_r)
///   z = σ(x·W_z + h·U_z + b_z)
///   h̃ = tanh(x·W_h + (r⊙h)·U_h + b_h)
///   h' = z⊙h + (1−z)⊙h̃
inline Var gru_cell_step(Var x, Var h_prev, const GruVars& p) {
  Var r = sigmoid(add_bias(add(matmul(x, p.w_reset), matmul(h_prev, p.u_reset)), p.b_reset));
  Var z = sigmoid(add_bias(add(matmul(x, p.w_update), matmul(h_prev, p.u_update)), p.b_update));
  Var cand = tanh(add_bias(add(matmul(x, p.w_candidate), matmul(mul(r, h_prev), p.u_candidate)),
                           p.b_candidate));
  return add(mul(z, h_prev), mul(one_minus(z), cand));
}

struct LstmState {
  Var h, c;
};

/// Standard LSTM step: c' = f⊙c + i⊙tanh(·), h' = o⊙tanh(c').
inline LstmState lstm_cell_step(Var x, const LstmState& prev, const LstmVars& p) {
  auto pre = [&](const LstmGateVars& g) {
    return add_bias(add(matmul(x, g.w), matmul(prev.h, g.u)), g.b);
  };
  Var i = sigmoid(pre(p.input));
  Var f = sigmoid(pre(p.forget));
  Var o = sigmoid(pre(p.output));
  Var cand = tanh(pre(p.candidate));
  Var c = add(mul(f, prev.c), mul(i, cand));
  return {mul(o, tanh(c)), c};
}

enum class Direction { forward, backward };

/// Recurrent cell usable by recurrent_scan.
template <typename C>
concept RecurrentCell = requires(const C& cell, Tape& tape, Var x,
                                 const typename C::State& s) {
  { cell.initial(tape, std::size_t{}) } -> std::same_as<typename C::State>;
  { cell.step(x, s) } -> std::same_as<typename C::State>;
  { C::output(s) } -> std::same_as<Var>;
};

struct GruCell {
  using State = Var;
  GruVars vars;
  std::size_t hidden;

  State initial(Tape& t, std::size_t batch) const { return t.constant(Tensor({batch, hidden})); }
  State step(Var x, const State& h) const { return gru_cell_step(x, h, vars); }
  static Var output(const State& h) { return h; }
};

struct LstmCell {
  using State = LstmState;
  LstmVars vars;
  std::size_t hidden;

  State initial(Tape& t, std::size_t batch) const {
    return {t.constant(Tensor({batch, hidden})), t.constant(Tensor({batch, hidden}))};
  }
  State step(Var x, const State& s) const { return lstm_cell_step(x, s, vars); }
  static Var output(const State& s) { return s.h; }
};

/// Runs a cell over [batch × T × d] from a zero state. A backward scan walks
/// t = T..1 and writes the state for position t back at index t, so position
/// t holds the summary of the suffix t..T.
template <RecurrentCell Cell>
Var recurrent_scan(Var inputs, const Cell& cell, Direction dir) {
  const Shape& s = inputs.shape();
  if (s.size() != 3) {
    throw DimensionError("recurrent_scan: expected [batch × T × d], got " + shape_str(s));
  }
  const std::size_t batch = s[0], steps = s[1];
  if (steps == 0) throw ContractError("recurrent_scan: T must be >= 1");
  typename Cell::State state = cell.initial(inputs.tape(), batch);
  std::vector<Var> outputs(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const std::size_t t = dir == Direction::forward ? k : steps - 1 - k;
    state = cell.step(select(inputs, 1, t), state);
    outputs[t] = Cell::output(state);
  }
  return stack(outputs, 1);
}

/// Per-position [backward state ‖ embedding ‖ forward state].
inline Var birnn_context(Var x, Var fwd_out, Var bwd_out) {
  const Shape& xs = x.shape();
  const Shape& fs = fwd_out.shape();
  const Shape& bs = bwd_out.shape();
  if (xs.size() != 3 || fs.size() != 3 || bs.size() != 3 || xs[0] != fs[0] ||
      xs[0] != bs[0] || xs[1] != fs[1] || xs[1] != bs[1]) {
    throw DimensionError("birnn_context: batch/time disagree among " + shape_str(xs) +
                         ", " + shape_str(fs) + ", " + shape_str(bs));
  }
  return concat({bwd_out, x, fwd_out}, 2);
}

/// Nonlinearity g of the highway transform path.
enum class Activation { relu, tanh };

inline Var activate(Activation a, Var x) {
  return a == Activation::relu ? relu(x) : tanh(x);
}

/// Applies `fn` to x viewed as [(leading) × d] and restores the leading dims.
template <typename Fn>
Var apply_rowwise(Var x, Fn&& fn) {
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  Shape lead(s.begin(), s.end() - 1);
  Var flat = reshape(x, {x.value().size() / d, d});
  Var out = fn(flat);
  lead.push_back(out.shape().back());
  return reshape(out, std::move(lead));
}

/// Highway block at every position:
///   τ = σ(x̃·W_τ + b_τ),  y = τ⊙g(x̃·W_H + b_H) + (1−τ)⊙x̃.
/// The gate reads x̃ itself so that it has the carry path's width.
inline Var highway_forward(Var x_tilde, const HighwayVars& p,
                           Activation g = Activation::relu) {
  const Shape& ws = p.w_transform.shape();
  const Shape& gs = p.w_gate.shape();
  const std::size_t d = x_tilde.shape().back();
  if (ws.size() != 2 || ws[0] != ws[1] || gs != ws || ws[0] != d ||
      p.b_transform.shape() != Shape{d} || p.b_gate.shape() != Shape{d}) {
    throw DimensionError("highway_forward: parameters must be square " + shape_str({d, d}) +
                         ", got transform " + shape_str(ws) + " and gate " +
                         shape_str(gs));
  }
  return apply_rowwise(x_tilde, [&](Var x) {
    Var gate = sigmoid(add_bias(matmul(x, p.w_gate), p.b_gate));
    Var transformed = activate(g, add_bias(matmul(x, p.w_transform), p.b_transform));
    return add(mul(gate, transformed), mul(one_minus(gate), x));
  });
}

/// Plain dense + relu block (the "one MLP layer" ablation).
inline Var mlp_forward(Var x, const DenseVars& p) {
  return apply_rowwise(x, [&](Var v) { return relu(add_bias(matmul(v, p.weight), p.bias)); });
}

/// [batch × T × d] → [batch × (T−h+1) × h·d]; window i is the flattened
/// rows i..i+h−1.
inline Var unfold_windows(Var y, std::size_t window) {
  const Shape& s = y.shape();
  const std::size_t batch = s[0], steps = s[1], d = s[2];
  const std::size_t len = steps - window + 1;
  const std::size_t w = window * d;
  Tensor out({batch, len, w});
  auto in = y.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      std::copy_n(in.begin() + (b * steps + i) * d, w, out.data().begin() + (b * len + i) * w);
    }
  }
  return y.tape().push(std::move(out), {y}, [y, batch, steps, d, len, w](Tape& t, const Tensor& g) {
    auto gy = t.grad_ref(y.id()).data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < len; ++i) {
        double* dst = gy.data() + (b * steps + i) * d;
        const double* src = g.data().data() + (b * len + i) * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
      }
    }
  });
}

/// Valid 1-D convolution with relu:
///   c_i = relu(filters · flatten(y_{i..i+h−1}) + bias),  i = 1..T−h+1.
inline Var conv1d_forward(Var y, const ConvVars& p) {
  const Shape& s = y.shape();
  if (s.size() != 3) {
    throw DimensionError("conv1d_forward: expected [batch × T × d], got " + shape_str(s));
  }
  const std::size_t steps = s[1], d = s[2];
  if (p.window < 1) throw ContractError("conv1d_forward: window must be >= 1");
  if (steps < p.window) {
    throw ContractError("conv1d_forward: sequence length " + std::to_string(steps) +
                        " is shorter than window " + std::to_string(p.window));
  }
  const Shape& fs = p.filters.shape();
  if (fs.size() != 2 || fs[1] != p.window * d || p.bias.shape() != Shape{fs[0]}) {
    throw DimensionError("conv1d_forward: filters " + shape_str(fs) +
                         " do not match window " + std::to_string(p.window) +
                         " over width " + std::to_string(d));
  }
  Var windows = p.window == 1 ? y : unfold_windows(y, p.window);
  Var filters_t = transpose(p.filters);
  return apply_rowwise(windows, [&](Var v) {
    return relu(add_bias(matmul(v, filters_t), p.bias));
  });
}

/// Per-filter maximum over the time axis: [batch × L × F] → [batch × F].
inline Var maxpool_over_time(Var feature_map) {
  const Shape& s = feature_map.shape();
  if (s.size() != 3) {
    throw DimensionError("maxpool_over_time: expected [batch × L × F], got " + shape_str(s));
  }
  if (s[1] < 1) throw ContractError("maxpool_over_time: L must be >= 1");
  return max_over_axis(feature_map, 1).values;
}

/// Sum (or mean, dividing by the true length) over the first lengths[b]
/// positions of each example; padded positions get no gradient.
inline Var masked_time_reduce(Var x, const std::vector<std::size_t>& lengths, bool mean) {
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw DimensionError("time reduction: expected [batch × T × d], got " + shape_str(s));
  }
  const std::size_t batch = s[0], steps = s[1], d = s[2];
  if (lengths.size() != batch) throw ContractError("time reduction: one length per example");
  for (std::size_t len : lengths) {
    if (len == 0) throw ContractError("time reduction: zero length");
    if (len > steps) throw ContractError("time reduction: length exceeds T");
  }
  Tensor out({batch, d});
  auto in = x.value().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double w = mean ? 1.0 / static_cast<double>(lengths[b]) : 1.0;
    for (std::size_t t = 0; t < lengths[b]; ++t) {
      for (std::size_t j = 0; j < d; ++j) out.at(b, j) += in[(b * steps + t) * d + j];
    }
    if (mean) {
      for (std::size_t j = 0; j < d; ++j) out.at(b, j) *= w;
    }
  }
  return x.tape().push(std::move(out), {x}, [x, lengths, mean, steps, d](Tape& t, const Tensor& g) {
    auto gx = t.grad_ref(x.id()).data();
    for (std::size_t b = 0; b < lengths.size(); ++b) {
      const double w = mean ? 1.0 / static_cast<double>(lengths[b]) : 1.0;
      for (std::size_t tt = 0; tt < lengths[b]; ++tt) {
        for (std::size_t j = 0; j < d; ++j) gx[(b * steps + tt) * d + j] += w * g[b * d + j];
      }
    }
  });
}

inline Var mean_over_time(Var x, const std::vector<std::size_t>& lengths) {
  return masked_time_reduce(x, lengths, true);
}

inline Var sum_over_time(Var x, const std::vector<std::size_t>& lengths) {
  return masked_time_reduce(x, lengths, false);
}

/// softmax(x·W + b) over classes.
inline Var dense_softmax(Var x, const DenseVars& p) {
  if (p.weight.shape().size() != 2 || p.weight.shape()[1] < 2) {
    throw DimensionError("dense_softmax: need at least two classes, weight is " +
                         shape_str(p.weight.shape()));
  }
  return softmax(add_bias(matmul(x, p.weight), p.bias));
}

}  // namespace rcnnhw
