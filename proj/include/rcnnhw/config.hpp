// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "rcnnhw/data.hpp"
#include "rcnnhw/errors.hpp"
#include "rcnnhw/models.hpp"
#include "rcnnhw/optim.hpp"

namespace rcnnhw {

using Json = nlohmann::json;

inline constexpr const char* kVersionTag = "rcnnhw-1.0.0";

/// Everything that determines one training run.
struct TrainConfig {
  ModelSpec model;  // vocab_size is filled in from the vocabulary
  OptimizerConfig optimizer;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t init_seed = 1;
  std::uint64_t shuffle_seed = 2;
  double val_fraction = 0.1;
  std::size_t patience = 3;
  /// Global-norm gradient clip; negative = default (5.0 for recurrent models,
  /// off otherwise), 0 = off.
  double clip_norm = -1.0;
  std::size_t vocab_max_size = 20000;
  std::size_t vocab_min_freq = 2;
  Truncation truncation = Truncation::head;
  std::string out_dir = "out";

  std::size_t seq_len() const { return model.seq_len; }

  bool is_recurrent() const {
    return model.kind != ModelKind::cow && model.kind != ModelKind::cnn;
  }

  double resolved_clip_norm() const {
    if (clip_norm >= 0.0) return clip_norm;
    return is_recurrent() ? 5.0 : 0.0;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw ConfigError("val_fraction must be in [0, 1)");
    }
    if (vocab_max_size < 2) throw ConfigError("vocab_max_size must be >= 2");
  }
};

// ---------------------------------------------------------------------------
// JSON mapping
// ---------------------------------------------------------------------------

inline Json to_json(const ModelSpec& s) {
  return Json{{"kind", to_string(s.kind)},
              {"vocab_size", s.vocab_size},
              {"embed_dim", s.embed_dim},
              {"hidden_dim", s.hidden_dim},
              {"num_filters", s.num_filters},
              {"cnn_windows", s.cnn_windows},
              {"cnn_lstm_window", s.cnn_lstm_window},
              {"highway_layers", s.highway_layers},
              {"mlp_instead_of_highway", s.mlp_instead_of_highway},
              {"num_classes", s.num_classes},
              {"seq_len", s.seq_len}};
}

namespace detail {

template <typename T>
void read_field(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace detail

/// Overlays fields present in `j` onto `s`.
inline void merge_json(const Json& j, ModelSpec& s) {
  if (!j.is_object()) throw ConfigError("model spec must be a JSON object");
  if (j.contains("kind")) {
    if (!j["kind"].is_string()) throw ConfigError("config field 'kind' must be a string");
    s.kind = parse_model_kind(j["kind"].get<std::string>());
  }
  detail::read_field(j, "vocab_size", s.vocab_size);
  detail::read_field(j, "embed_dim", s.embed_dim);
  detail::read_field(j, "hidden_dim", s.hidden_dim);
  detail::read_field(j, "num_filters", s.num_filters);
  detail::read_field(j, "cnn_windows", s.cnn_windows);
  detail::read_field(j, "cnn_lstm_window", s.cnn_lstm_window);
  detail::read_field(j, "highway_layers", s.highway_layers);
  detail::read_field(j, "mlp_instead_of_highway", s.mlp_instead_of_highway);
  detail::read_field(j, "num_classes", s.num_classes);
  detail::read_field(j, "seq_len", s.seq_len);
}

inline ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec s;
  merge_json(j, s);
  return s;
}

inline Json to_json(const OptimizerConfig& o) {
  return Json{{"name", to_string(o.kind)},
              {"lr", o.resolved_lr()},
              {"rho", o.resolved_rho()},
              {"eps", o.resolved_eps()},
              {"beta1", o.beta1},
              {"beta2", o.beta2}};
}

inline void merge_json(const Json& j, OptimizerConfig& o) {
  if (!j.is_object()) throw ConfigError("optimizer must be a JSON object");
  if (j.contains("name")) {
    if (!j["name"].is_string()) throw ConfigError("optimizer name must be a string");
    o.kind = parse_optimizer_kind(j["name"].get<std::string>());
  }
  detail::read_field(j, "lr", o.lr);
  detail::read_field(j, "rho", o.rho);
  detail::read_field(j, "eps", o.eps);
  detail::read_field(j, "beta1", o.beta1);
  detail::read_field(j, "beta2", o.beta2);
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"optimizer", to_json(c.optimizer)},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"seq_len", c.model.seq_len},
              {"init_seed", c.init_seed},
              {"shuffle_seed", c.shuffle_seed},
              {"val_fraction", c.val_fraction},
              {"patience", c.patience},
              {"clip_norm", c.resolved_clip_norm()},
              {"vocab_max_size", c.vocab_max_size},
              {"vocab_min_freq", c.vocab_min_freq},
              {"truncation", c.truncation == Truncation::head ? "head" : "tail"},
              {"out_dir", c.out_dir}};
}

/// Overlays a JSON config (TrainConfig field names) onto `c`.
inline void merge_json(const Json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (j.contains("model")) merge_json(j["model"], c.model);
  if (j.contains("optimizer")) merge_json(j["optimizer"], c.optimizer);
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "seq_len", c.model.seq_len);
  detail::read_field(j, "init_seed", c.init_seed);
  detail::read_field(j, "shuffle_seed", c.shuffle_seed);
  detail::read_field(j, "val_fraction", c.val_fraction);
  detail::read_field(j, "patience", c.patience);
  detail::read_field(j, "clip_norm", c.clip_norm);
  detail::read_field(j, "vocab_max_size", c.vocab_max_size);
  detail::read_field(j, "vocab_min_freq", c.vocab_min_freq);
  detail::read_field(j, "out_dir", c.out_dir);
  if (j.contains("truncation")) {
    const std::string t = j["truncation"].is_string() ? j["truncation"].get<std::string>() : "";
    if (t == "head") {
      c.truncation = Truncation::head;
    } else if (t == "tail") {
      c.truncation = Truncation::tail;
    } else {
      throw ConfigError("truncation must be \"head\" or \"tail\"");
    }
  }
}

}  // namespace rcnnhw
