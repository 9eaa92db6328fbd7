// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rcnnhw/autodiff.hpp"
#include "rcnnhw/batch.hpp"
#include "rcnnhw/layers.hpp"
#include "rcnnhw/random.hpp"

namespace rcnnhw {

enum class ModelKind { cow, lstm_avg, bilstm_avg, cnn, cnn_lstm, rcnn, rcnn_hw };

inline constexpr ModelKind kAllModelKinds[] = {
    ModelKind::cow, ModelKind::lstm_avg, ModelKind::bilstm_avg, ModelKind::cnn,
    ModelKind::cnn_lstm, ModelKind::rcnn, ModelKind::rcnn_hw};

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::cow: return "cow";
    case ModelKind::lstm_avg: return "lstm";
    case ModelKind::bilstm_avg: return "bilstm";
    case ModelKind::cnn: return "cnn";
    case ModelKind::cnn_lstm: return "cnn-lstm";
    case ModelKind::rcnn: return "rcnn";
    case ModelKind::rcnn_hw: return "rcnn-hw";
  }
  return "?";
}

inline std::string valid_kind_list() {
  std::string s;
  for (ModelKind k : kAllModelKinds) {
    if (!s.empty()) s += ", ";
    s += to_string(k);
  }
  return s;
}

inline ModelKind parse_model_kind(const std::string& name) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) {
    return c == '_' ? '-' : static_cast<char>(std::tolower(c));
  });
  if (n == "lstm-avg") return ModelKind::lstm_avg;
  if (n == "bilstm-avg" || n == "bi-lstm") return ModelKind::bilstm_avg;
  if (n == "cnn+lstm") return ModelKind::cnn_lstm;
  for (ModelKind k : kAllModelKinds) {
    if (to_string(k) == n) return k;
  }
  throw ConfigError("unknown model kind '" + name + "'; valid kinds: " + valid_kind_list());
}

struct ModelSpec {
  ModelKind kind = ModelKind::rcnn_hw;
  std::size_t vocab_size = 2;
  std::size_t embed_dim = 100;
  std::size_t hidden_dim = 32;
  std::size_t num_filters = 256;
  std::vector<std::size_t> cnn_windows{3, 4, 5};
  std::size_t cnn_lstm_window = 3;
  std::size_t highway_layers = 1;
  bool mlp_instead_of_highway = false;
  std::size_t num_classes = 2;
  std::size_t seq_len = 100;

  /// Highway block count actually wired into the network.
  std::size_t effective_highway_layers() const {
    return kind == ModelKind::rcnn_hw && !mlp_instead_of_highway ? highway_layers : 0;
  }

  /// Width of the contextual representation [h← ‖ x ‖ h→].
  std::size_t context_width() const { return 2 * hidden_dim + embed_dim; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(embed_dim, "embed_dim");
    positive(hidden_dim, "hidden_dim");
    positive(num_filters, "num_filters");
    positive(seq_len, "seq_len");
    if (vocab_size < 2) throw ConfigError("vocab_size must include PAD and UNK (>= 2)");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (kind != ModelKind::rcnn_hw && mlp_instead_of_highway) {
      throw ConfigError("the MLP block is only valid for rcnn-hw");
    }
    if (kind == ModelKind::rcnn_hw && highway_layers > 2) {
      throw ConfigError("highway_layers must be 0, 1 or 2");
    }
    if (kind == ModelKind::cnn) {
      if (cnn_windows.empty()) throw ConfigError("cnn_windows must not be empty");
      for (std::size_t w : cnn_windows) {
        positive(w, "cnn window");
        if (w > seq_len) throw ConfigError("cnn window " + std::to_string(w) + " exceeds seq_len");
      }
    }
    if (kind == ModelKind::cnn_lstm) {
      positive(cnn_lstm_window, "cnn_lstm_window");
      if (cnn_lstm_window > seq_len) throw ConfigError("cnn_lstm_window exceeds seq_len");
    }
  }
};

inline bool operator==(const ModelSpec& a, const ModelSpec& b) {
  return a.kind == b.kind && a.vocab_size == b.vocab_size && a.embed_dim == b.embed_dim &&
         a.hidden_dim == b.hidden_dim && a.num_filters == b.num_filters &&
         a.cnn_windows == b.cnn_windows && a.cnn_lstm_window == b.cnn_lstm_window &&
         a.highway_layers == b.highway_layers &&
         a.mlp_instead_of_highway == b.mlp_instead_of_highway &&
         a.num_classes == b.num_classes && a.seq_len == b.seq_len;
}

struct NamedParameter {
  std::string name;
  Parameter* param;
};

/// One of the seven architectures with its live parameters.
struct Model {
  ModelSpec spec;
  EmbeddingParams embedding;
  std::optional<LstmParams> lstm_fwd, lstm_bwd;
  std::optional<GruParams> gru_fwd, gru_bwd;
  std::vector<HighwayParams> highways;
  std::optional<DenseParams> mlp;
  std::vector<ConvParams> convs;
  DenseParams head;

  /// Visits every parameter in a fixed order with a dotted name.
  template <typename Fn>
  void for_each_parameter(Fn&& fn) const {
    auto scoped = [&fn](const std::string& scope) {
      return [&fn, scope](const std::string& name, const Parameter& p) {
        fn(scope + "." + name, p);
      };
    };
    fn(std::string("embedding.table"), embedding.table);
    if (lstm_fwd) lstm_fwd->for_each(scoped("lstm_fwd"));
    if (lstm_bwd) lstm_bwd->for_each(scoped("lstm_bwd"));
    if (gru_fwd) gru_fwd->for_each(scoped("gru_fwd"));
    if (gru_bwd) gru_bwd->for_each(scoped("gru_bwd"));
    for (std::size_t i = 0; i < highways.size(); ++i) {
      highways[i].for_each(scoped("highway" + std::to_string(i)));
    }
    if (mlp) mlp->for_each(scoped("mlp"));
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i].for_each(scoped("conv" + std::to_string(i)));
    }
    head.for_each(scoped("head"));
  }

  /// Mutable view of all parameters, in for_each_parameter order.
  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    for_each_parameter([&out](const std::string& name, const Parameter& p) {
      out.push_back({name, const_cast<Parameter*>(&p)});
    });
    return out;
  }

  /// Tally of trainable scalars in the live collection.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_parameter([&n](const std::string&, const Parameter& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() const {
    for_each_parameter([](const std::string&, const Parameter& p) { p.zero_grad(); });
  }
};

/// Trainable scalar count from the spec alone.
///
///   embedding            V·e
///   GRU (in, h)          3·(in·h + h·h + h)
///   LSTM (in, h)         4·(in·h + h·h + h)
///   conv (F, w, in)      F·w·in + F
///   highway (d)          2·(d·d + d)
///   MLP block (d)        d·d + d
///   head (in, C)         in·C + C
inline std::size_t count_params(const ModelSpec& spec) {
  spec.validate();
  const std::size_t e = spec.embed_dim, h = spec.hidden_dim, f = spec.num_filters;
  const std::size_t c = spec.num_classes;
  auto gru = [](std::size_t in, std::size_t hid) { return 3 * (in * hid + hid * hid + hid); };
  auto lstm = [](std::size_t in, std::size_t hid) { return 4 * (in * hid + hid * hid + hid); };
  auto conv = [](std::size_t filters, std::size_t w, std::size_t in) {
    return filters * w * in + filters;
  };
  auto head = [c](std::size_t in) { return in * c + c; };
  const std::size_t emb = spec.vocab_size * e;
  switch (spec.kind) {
    case ModelKind::cow: return emb + head(e);
    case ModelKind::lstm_avg: return emb + lstm(e, h) + head(h);
    case ModelKind::bilstm_avg: return emb + 2 * lstm(e, h) + head(2 * h);
    case ModelKind::cnn: {
      std::size_t n = emb + head(spec.cnn_windows.size() * f);
      for (std::size_t w : spec.cnn_windows) n += conv(f, w, e);
      return n;
    }
    case ModelKind::cnn_lstm:
      return emb + conv(f, spec.cnn_lstm_window, e) + lstm(f, h) + head(h);
    case ModelKind::rcnn:
    case ModelKind::rcnn_hw: {
      const std::size_t d = spec.context_width();
      std::size_t n = emb + 2 * gru(e, h) + conv(f, 1, d) + head(f);
      if (spec.kind == ModelKind::rcnn_hw) {
        n += spec.mlp_instead_of_highway ? d * d + d : spec.highway_layers * 2 * (d * d + d);
      }
      return n;
    }
  }
  return 0;
}

/// Allocates and initializes parameters for `spec`. Draw order is fixed, so
/// (spec, seed) determines every value.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Model m;
  m.spec = spec;
  const std::size_t e = spec.embed_dim, h = spec.hidden_dim, f = spec.num_filters;
  m.embedding = EmbeddingParams::init(spec.vocab_size, e, rng);
  std::size_t features = 0;
  switch (spec.kind) {
    case ModelKind::cow:
      features = e;
      break;
    case ModelKind::lstm_avg:
      m.lstm_fwd = LstmParams::init(e, h, rng);
      features = h;
      break;
    case ModelKind::bilstm_avg:
      m.lstm_fwd = LstmParams::init(e, h, rng);
      m.lstm_bwd = LstmParams::init(e, h, rng);
      features = 2 * h;
      break;
    case ModelKind::cnn:
      for (std::size_t w : spec.cnn_windows) m.convs.push_back(ConvParams::init(f, w, e, rng));
      features = spec.cnn_windows.size() * f;
      break;
    case ModelKind::cnn_lstm:
      m.convs.push_back(ConvParams::init(f, spec.cnn_lstm_window, e, rng));
      m.lstm_fwd = LstmParams::init(f, h, rng);
      features = h;
      break;
    case ModelKind::rcnn:
    case ModelKind::rcnn_hw: {
      const std::size_t d = spec.context_width();
      m.gru_fwd = GruParams::init(e, h, rng);
      m.gru_bwd = GruParams::init(e, h, rng);
      if (spec.kind == ModelKind::rcnn_hw) {
        if (spec.mlp_instead_of_highway) {
          m.mlp = DenseParams::init(d, d, rng);
        } else {
          for (std::size_t i = 0; i < spec.highway_layers; ++i) {
            m.highways.push_back(HighwayParams::init(d, rng));
          }
        }
      }
      m.convs.push_back(ConvParams::init(f, 1, d, rng));
      features = f;
      break;
    }
  }
  m.head = DenseParams::init(features, spec.num_classes, rng);
  return m;
}

/// Text representation before the softmax head, [batch × features].
inline Var encode_text(Tape& tape, const Model& m, const EncodedBatch& batch) {
  const ModelSpec& spec = m.spec;
  if (batch.seq_len != spec.seq_len) {
    throw ContractError("batch seq_len " + std::to_string(batch.seq_len) +
                        " does not match model seq_len " + std::to_string(spec.seq_len));
  }
  Var x = embed(batch, tape.param(m.embedding.table));
  switch (spec.kind) {
    case ModelKind::cow:
      return sum_over_time(x, batch.lengths);
    case ModelKind::lstm_avg: {
      Var hs = recurrent_scan(x, LstmCell{m.lstm_fwd->bind(tape), spec.hidden_dim},
                              Direction::forward);
      return mean_over_time(hs, batch.lengths);
    }
    case ModelKind::bilstm_avg: {
      Var fwd = recurrent_scan(x, LstmCell{m.lstm_fwd->bind(tape), spec.hidden_dim},
                               Direction::forward);
      Var bwd = recurrent_scan(x, LstmCell{m.lstm_bwd->bind(tape), spec.hidden_dim},
                               Direction::backward);
      return mean_over_time(concat({fwd, bwd}, 2), batch.lengths);
    }
    case ModelKind::cnn: {
      std::vector<Var> pooled;
      for (const ConvParams& c : m.convs) {
        pooled.push_back(maxpool_over_time(conv1d_forward(x, c.bind(tape))));
      }
      return pooled.size() == 1 ? pooled.front() : concat(pooled, 1);
    }
    case ModelKind::cnn_lstm: {
      Var fm = conv1d_forward(x, m.convs.front().bind(tape));
      Var hs = recurrent_scan(fm, LstmCell{m.lstm_fwd->bind(tape), spec.hidden_dim},
                              Direction::forward);
      // Feature-map position i covers tokens i..i+w−1; it counts as real when
      // its first token is inside the true length.
      const std::size_t len = fm.shape()[1];
      std::vector<std::size_t> lengths(batch.batch);
      for (std::size_t b = 0; b < batch.batch; ++b) {
        lengths[b] = std::clamp<std::size_t>(batch.lengths[b], 1, len);
      }
      return mean_over_time(hs, lengths);
    }
    case ModelKind::rcnn:
    case ModelKind::rcnn_hw: {
      Var fwd = recurrent_scan(x, GruCell{m.gru_fwd->bind(tape), spec.hidden_dim},
                               Direction::forward);
      Var bwd = recurrent_scan(x, GruCell{m.gru_bwd->bind(tape), spec.hidden_dim},
                               Direction::backward);
      Var y = birnn_context(x, fwd, bwd);
      for (const HighwayParams& hw : m.highways) y = highway_forward(y, hw.bind(tape));
      if (m.mlp) y = mlp_forward(y, m.mlp->bind(tape));
      return maxpool_over_time(conv1d_forward(y, m.convs.front().bind(tape)));
    }
  }
  throw ContractError("unhandled model kind");
}

/// Class probabilities [batch × classes] on the given tape.
inline Var forward(Tape& tape, const Model& m, const EncodedBatch& batch) {
  return dense_softmax(encode_text(tape, m, batch), m.head.bind(tape));
}

/// Inference without gradient bookkeeping.
inline Tensor predict(const Model& m, const EncodedBatch& batch) {
  Tape tape(false);
  return forward(tape, m, batch).value();
}

}  // namespace rcnnhw
