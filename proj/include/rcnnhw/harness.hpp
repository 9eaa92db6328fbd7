// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rcnnhw/checkpoint.hpp"
#include "rcnnhw/config.hpp"
#include "rcnnhw/data.hpp"
#include "rcnnhw/models.hpp"
#include "rcnnhw/optim.hpp"

namespace rcnnhw {

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;
  double seconds = 0.0;
};

struct RunReport {
  Json config;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  std::string version = kVersionTag;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_accuracy;
  std::optional<double> test_accuracy;
  bool early_stopped = false;

  /// With include_timing = false the result depends only on seeds and config.
  Json to_json(bool include_timing = true) const {
    Json ep = Json::array();
    for (const EpochRecord& e : epochs) {
      Json r{{"epoch", e.epoch},
             {"train_loss", e.train_loss},
             {"train_accuracy", e.train_accuracy},
             {"val_accuracy", e.val_accuracy ? Json(*e.val_accuracy) : Json(nullptr)}};
      if (include_timing) r["seconds"] = e.seconds;
      ep.push_back(std::move(r));
    }
    return Json{{"version", version},
                {"init_seed", init_seed},
                {"shuffle_seed", shuffle_seed},
                {"config", config},
                {"epochs", ep},
                {"epochs_run", epochs.size()},
                {"early_stopped", early_stopped},
                {"best_epoch", best_epoch},
                {"best_val_accuracy",
                 best_val_accuracy ? Json(*best_val_accuracy) : Json(nullptr)},
                {"test_accuracy", test_accuracy ? Json(*test_accuracy) : Json(nullptr)}};
  }
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Index of the largest probability; ties go to the lower class.
inline std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t classes = probs.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    if (probs.at(row, c) > probs.at(row, best)) best = c;
  }
  return best;
}

inline double evaluate(const Model& model, const EncodedDataset& data,
                       std::size_t batch_size = 32) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  if (data.seq_len != model.spec.seq_len) {
    throw ContractError("evaluate: data seq_len " + std::to_string(data.seq_len) +
                        " does not match model seq_len " + std::to_string(model.spec.seq_len));
  }
  std::size_t correct = 0;
  for (const EncodedBatch& b : make_batches(data, batch_size, std::nullopt)) {
    const Tensor probs = predict(model, b);
    for (std::size_t i = 0; i < b.batch; ++i) {
      if (static_cast<int>(argmax_row(probs, i)) == b.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double evaluate(const Model& model, const TextDataset& ds, const Vocabulary& vocab,
                       std::size_t seq_len, Truncation trunc = Truncation::head) {
  if (ds.empty()) throw ContractError("evaluate: empty dataset");
  return evaluate(model, encode_dataset(ds, vocab, seq_len, trunc));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  Model model;
  RunReport report;
};

/// Progress callback: (epoch record) after each epoch.
using EpochObserver = std::function<void(const EpochRecord&)>;

/// Epoch loop of forward → loss → backward → clip → optimizer step. After
/// every epoch the model is scored on `val`; the best-scoring parameters are
/// returned and training stops after `patience` epochs without improvement.
/// Without a validation set, training accuracy drives selection.
inline TrainResult train(TrainConfig config, const Vocabulary& vocab,
                         const TextDataset& train_set, const TextDataset& val_set,
                         const EpochObserver& observer = {}) {
  config.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  config.model.vocab_size = vocab.size();
  config.model.validate();

  const EncodedDataset train_data =
      encode_dataset(train_set, vocab, config.seq_len(), config.truncation);
  std::optional<EncodedDataset> val_data;
  if (!val_set.empty()) {
    val_data = encode_dataset(val_set, vocab, config.seq_len(), config.truncation);
  }

  TrainResult result{build_model(config.model, config.init_seed), {}};
  RunReport& report = result.report;
  report.config = to_json(config);
  report.init_seed = config.init_seed;
  report.shuffle_seed = config.shuffle_seed;

  Model& model = result.model;
  Model best = model;
  std::optional<double> best_score;
  std::size_t stale = 0;
  Optimizer optimizer(config.optimizer);
  const double clip = config.resolved_clip_norm();
  std::vector<NamedParameter> params = model.parameters();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto batches = make_batches(train_data, config.batch_size, config.shuffle_seed, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const EncodedBatch& b = batches[bi];
      model.zero_grad();
      Tape tape;
      Var probs = forward(tape, model, b);
      Var loss = cross_entropy_loss(probs, b.labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "non-finite loss " << lv << " at epoch " << epoch << ", batch " << bi;
        throw NumericError(msg.str());
      }
      for (std::size_t i = 0; i < b.batch; ++i) {
        if (static_cast<int>(argmax_row(probs.value(), i)) == b.labels[i]) ++correct;
      }
      loss_sum += lv * static_cast<double>(b.batch);
      tape.backward(loss);
      if (clip > 0.0) clip_gradients(params, clip);
      optimizer.step(params);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    const auto n = static_cast<double>(train_data.size());
    rec.train_loss = loss_sum / n;
    rec.train_accuracy = static_cast<double>(correct) / n;
    if (val_data) rec.val_accuracy = evaluate(model, *val_data, config.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(rec);
    if (observer) observer(rec);

    const double score = rec.val_accuracy.value_or(rec.train_accuracy);
    if (!best_score || score > *best_score) {
      best_score = score;
      best = model;
      report.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience && config.patience > 0) {
      report.early_stopped = epoch < config.epochs;
      break;
    }
  }
  if (val_data) report.best_val_accuracy = best_score;
  result.model = std::move(best);
  return result;
}

/// Builds the vocabulary from `train_text`, carves a validation split off it,
/// trains, and scores the selected model on `test`.
struct Experiment {
  Vocabulary vocab;
  TrainResult result;
};

inline Experiment run_experiment(const TrainConfig& config, const TextDataset& train_text,
                                 const TextDataset& test, const EpochObserver& observer = {}) {
  config.validate();
  if (train_text.empty()) throw DataError("training set is empty");
  auto [train_part, val_part] =
      split_validation(train_text, config.val_fraction, derive_seed(config.shuffle_seed, 0x7a1));
  Experiment ex;
  ex.vocab = build_vocab(train_part, config.vocab_max_size, config.vocab_min_freq);
  ex.result = train(config, ex.vocab, train_part, val_part, observer);
  if (!test.empty()) {
    ex.result.report.test_accuracy =
        evaluate(ex.result.model, test, ex.vocab, config.seq_len(), config.truncation);
  }
  return ex;
}

// ---------------------------------------------------------------------------
// CSV helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

inline std::string fmt_num(std::optional<double> v, int precision = 6) {
  if (!v || !std::isfinite(*v)) return "";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

inline Json opt_json(std::optional<double> v) {
  return v && std::isfinite(*v) ? Json(*v) : Json(nullptr);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model comparison (Tables 1 and 2)
// ---------------------------------------------------------------------------

/// One architecture variant to compare.
struct ComparisonEntry {
  std::string label;
  ModelKind kind = ModelKind::rcnn_hw;
  std::size_t highway_layers = 1;
  bool mlp = false;
  std::string row_set;                      // "architectures" / "highway-ablation"
  std::optional<double> reference_accuracy; // context only, not a target
};

/// Reference accuracies reported for the full IMDB training regime.
inline std::optional<double> architecture_reference(ModelKind k) {
  switch (k) {
    case ModelKind::cow: return 0.890;
    case ModelKind::lstm_avg: return 0.885;
    case ModelKind::bilstm_avg: return 0.881;
    case ModelKind::cnn_lstm: return 0.890;
    case ModelKind::cnn: return 0.895;
    case ModelKind::rcnn: return 0.900;
    case ModelKind::rcnn_hw: return 0.903;
  }
  return std::nullopt;
}

inline std::string architecture_label(ModelKind k) {
  switch (k) {
    case ModelKind::cow: return "COW";
    case ModelKind::lstm_avg: return "LSTM";
    case ModelKind::bilstm_avg: return "Bi-LSTM";
    case ModelKind::cnn_lstm: return "CNN+LSTM";
    case ModelKind::cnn: return "CNN";
    case ModelKind::rcnn: return "RCNN";
    case ModelKind::rcnn_hw: return "RCNN-HW";
  }
  return "?";
}

inline ComparisonEntry architecture_entry(ModelKind k) {
  return {architecture_label(k), k, 1, false, "architectures", architecture_reference(k)};
}

/// Every architecture, baselines first.
inline std::vector<ComparisonEntry> architecture_entries() {
  std::vector<ComparisonEntry> out;
  for (ModelKind k : {ModelKind::cow, ModelKind::lstm_avg, ModelKind::bilstm_avg,
                      ModelKind::cnn_lstm, ModelKind::cnn, ModelKind::rcnn, ModelKind::rcnn_hw}) {
    out.push_back(architecture_entry(k));
  }
  return out;
}

/// Highway ablation: no highway, one, two highway blocks, one MLP block.
inline std::vector<ComparisonEntry> ablation_entries() {
  return {
      {"Without Highway Layers", ModelKind::rcnn, 0, false, "highway-ablation", 0.900},
      {"One Highway Layer", ModelKind::rcnn_hw, 1, false, "highway-ablation", 0.903},
      {"Two Highway Layers", ModelKind::rcnn_hw, 2, false, "highway-ablation", 0.903},
      {"One MLP Layer", ModelKind::rcnn_hw, 0, true, "highway-ablation", 0.899},
  };
}

/// Expands a comma list of kinds. "architectures" gives every architecture,
/// "rcnn-hw-ablation" the highway ablation rows and "all" both.
inline std::vector<ComparisonEntry> parse_comparison_entries(const std::string& list) {
  std::vector<ComparisonEntry> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    if (b == std::string::npos) continue;
    item = item.substr(b, item.find_last_not_of(' ') - b + 1);
    if (item == "rcnn-hw-ablation") {
      for (auto& e : ablation_entries()) out.push_back(e);
    } else if (item == "architectures") {
      for (auto& e : architecture_entries()) out.push_back(e);
    } else if (item == "all") {
      for (auto& e : architecture_entries()) out.push_back(e);
      for (auto& e : ablation_entries()) out.push_back(e);
    } else {
      out.push_back(architecture_entry(parse_model_kind(item)));
    }
  }
  if (out.empty()) throw ConfigError("empty model list");
  return out;
}

struct ComparisonRow {
  ComparisonEntry entry;
  std::optional<double> test_accuracy;
  std::optional<double> best_val_accuracy;
  std::size_t seq_len = 0;  // length that produced test_accuracy
  std::size_t epochs_run = 0;
  std::size_t param_count = 0;
  double seconds = 0.0;
  std::string error;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;

  /// With include_timing = false the seconds column is left empty.
  void write_csv(std::ostream& os, bool include_timing = true) const {
    os << "row_set,model,kind,highway_layers,mlp,seq_len,test_accuracy,best_val_accuracy,"
          "epochs_run,params,seconds,reference_accuracy,error\n";
    for (const ComparisonRow& r : rows) {
      os << r.entry.row_set << ',' << detail::csv_field(r.entry.label) << ','
         << to_string(r.entry.kind) << ',' << r.entry.highway_layers << ','
         << (r.entry.mlp ? 1 : 0) << ',' << r.seq_len << ','
         << detail::fmt_num(r.test_accuracy) << ',' << detail::fmt_num(r.best_val_accuracy)
         << ',' << r.epochs_run << ',' << r.param_count << ','
         << (include_timing ? detail::fmt_num(r.seconds, 3) : "") << ','
         << detail::fmt_num(r.entry.reference_accuracy, 3)
         << ',' << detail::csv_field(r.error) << '\n';
    }
  }

  Json to_json(bool include_timing = true) const {
    Json rows_json = Json::array();
    for (const ComparisonRow& r : rows) {
      rows_json.push_back({{"row_set", r.entry.row_set},
                           {"model", r.entry.label},
                           {"kind", to_string(r.entry.kind)},
                           {"highway_layers", r.entry.highway_layers},
                           {"mlp", r.entry.mlp ? 1 : 0},
                           {"seq_len", r.seq_len},
                           {"test_accuracy", detail::opt_json(r.test_accuracy)},
                           {"best_val_accuracy", detail::opt_json(r.best_val_accuracy)},
                           {"epochs_run", r.epochs_run},
                           {"params", r.param_count},
                           {"seconds", include_timing ? Json(r.seconds) : Json(nullptr)},
                           {"reference_accuracy", detail::opt_json(r.entry.reference_accuracy)},
                           {"error", r.error}});
    }
    return Json{{"rows", rows_json}};
  }
};

inline ModelSpec apply_entry(ModelSpec spec, const ComparisonEntry& e) {
  spec.kind = e.kind;
  spec.highway_layers = e.kind == ModelKind::rcnn_hw ? e.highway_layers : 0;
  spec.mlp_instead_of_highway = e.mlp;
  return spec;
}

/// Trains every entry with identical data, vocabulary and seeds. When several
/// sequence lengths are given, each entry keeps its best test accuracy over
/// them. Failures are recorded in the row and the remaining entries still run.
inline ComparisonTable run_model_comparison(const TrainConfig& base,
                                            const std::vector<ComparisonEntry>& entries,
                                            const TextDataset& train_text,
                                            const TextDataset& test,
                                            std::vector<std::size_t> seq_lens = {}) {
  if (entries.empty()) throw ConfigError("empty model list");
  if (seq_lens.empty()) seq_lens.push_back(base.seq_len());
  ComparisonTable table;
  for (const ComparisonEntry& e : entries) {
    ComparisonRow row;
    row.entry = e;
    for (std::size_t len : seq_lens) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        TrainConfig c = base;
        c.model = apply_entry(base.model, e);
        c.model.seq_len = len;
        Experiment ex = run_experiment(c, train_text, test);
        const auto acc = ex.result.report.test_accuracy;
        if (!row.test_accuracy || (acc && *acc > *row.test_accuracy)) {
          row.test_accuracy = acc;
          row.best_val_accuracy = ex.result.report.best_val_accuracy;
          row.seq_len = len;
          row.epochs_run = ex.result.report.epochs.size();
          row.param_count = ex.result.model.parameter_count();
        }
      } catch (const std::exception& ex) {
        if (!row.error.empty()) row.error += "; ";
        row.error += "seq_len " + std::to_string(len) + ": " + ex.what();
      }
      row.seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Sequence-length sweep
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> default_sweep_lengths() { return {100, 200, 300, 400, 500}; }

struct SweepRow {
  std::string model;
  std::size_t seq_len = 0;
  std::optional<double> test_accuracy;
  std::optional<double> best_val_accuracy;
  std::size_t epochs_run = 0;
  double seconds = 0.0;
  std::string error;
};

struct SweepTable {
  std::vector<SweepRow> rows;

  void write_csv(std::ostream& os, bool include_timing = true) const {
    os << "model,seq_len,test_accuracy,best_val_accuracy,epochs_run,seconds,error\n";
    for (const SweepRow& r : rows) {
      os << r.model << ',' << r.seq_len << ',' << detail::fmt_num(r.test_accuracy) << ','
         << detail::fmt_num(r.best_val_accuracy) << ',' << r.epochs_run << ','
         << (include_timing ? detail::fmt_num(r.seconds, 3) : "") << ','
         << detail::csv_field(r.error) << '\n';
    }
  }

  Json to_json(bool include_timing = true) const {
    Json rows_json = Json::array();
    for (const SweepRow& r : rows) {
      rows_json.push_back({{"model", r.model},
                           {"seq_len", r.seq_len},
                           {"test_accuracy", detail::opt_json(r.test_accuracy)},
                           {"best_val_accuracy", detail::opt_json(r.best_val_accuracy)},
                           {"epochs_run", r.epochs_run},
                           {"seconds", include_timing ? Json(r.seconds) : Json(nullptr)},
                           {"error", r.error}});
    }
    return Json{{"rows", rows_json}};
  }

  std::optional<double> accuracy(const std::string& model, std::size_t len) const {
    for (const SweepRow& r : rows) {
      if (r.model == model && r.seq_len == len) return r.test_accuracy;
    }
    return std::nullopt;
  }
};

/// Re-encodes the data at each length and retrains from scratch with an
/// init seed derived from the base seed and the length.
inline SweepTable run_seqlen_sweep(const TrainConfig& base,
                                   const std::vector<ComparisonEntry>& models,
                                   const TextDataset& train_text, const TextDataset& test,
                                   const std::vector<std::size_t>& lengths = default_sweep_lengths()) {
  if (lengths.empty()) throw ConfigError("sweep needs at least one length");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw ConfigError("sweep lengths must be >= 1");
    if (i > 0 && lengths[i] <= lengths[i - 1]) {
      throw ConfigError("sweep lengths must be strictly ascending");
    }
  }
  if (models.empty()) throw ConfigError("empty model list");
  SweepTable table;
  for (const ComparisonEntry& e : models) {
    for (std::size_t len : lengths) {
      SweepRow row;
      row.model = e.label;
      row.seq_len = len;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        TrainConfig c = base;
        c.model = apply_entry(base.model, e);
        c.model.seq_len = len;
        c.init_seed = derive_seed(base.init_seed, len);
        Experiment ex = run_experiment(c, train_text, test);
        row.test_accuracy = ex.result.report.test_accuracy;
        row.best_val_accuracy = ex.result.report.best_val_accuracy;
        row.epochs_run = ex.result.report.epochs.size();
      } catch (const std::exception& ex) {
        row.error = ex.what();
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << content;
}

}  // namespace rcnnhw
