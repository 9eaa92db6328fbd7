// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "rcnnhw/checkpoint.hpp"
#include "rcnnhw/config.hpp"
#include "rcnnhw/data.hpp"
#include "rcnnhw/gradcheck_suite.hpp"
#include "rcnnhw/harness.hpp"

namespace rcnnhw {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitVerification = 5;

namespace cli_detail {

/// Flags shared by the commands that train models. Unset flags leave the
/// value from defaults / the JSON config untouched.
struct TrainFlags {
  std::string data;
  std::string test_data;
  std::string config_path;
  std::optional<std::string> model;
  std::optional<std::size_t> seq_len;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> embed_dim;
  std::optional<std::size_t> hidden_dim;
  std::optional<std::size_t> num_filters;
  std::optional<std::size_t> highway_layers;
  std::optional<std::string> optimizer;
  std::optional<double> lr;
  std::optional<double> val_fraction;
  std::optional<std::size_t> patience;
  std::optional<double> clip_norm;
  std::optional<std::size_t> vocab_max_size;
  std::optional<std::size_t> vocab_min_freq;
  double test_fraction = 0.2;
  bool timing = false;
};

template <typename T>
std::string str(const T& v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline void add_train_flags(CLI::App& cmd, TrainFlags& f, bool with_model) {
  const TrainConfig d;
  cmd.add_option("--data", f.data, "TSV file (label<TAB>text) or IMDB directory with train/ and test/")
      ->required();
  cmd.add_option("--test-data", f.test_data,
                 "Separate TSV test set; without it a TSV input is split by --test-fraction");
  cmd.add_option("--test-fraction", f.test_fraction,
                 "Share of a single TSV input held out for testing")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 0.99));
  cmd.add_option("--config", f.config_path, "JSON config file (TrainConfig field names)");
  cmd.add_flag("--timing", f.timing,
               "Record wall-clock seconds in output files (makes them run-dependent)");
  if (with_model) {
    cmd.add_option("--model", f.model,
                   "Model kind: cow, lstm, bilstm, cnn, cnn-lstm, rcnn, rcnn-hw")
        ->default_str(to_string(d.model.kind));
  }
  cmd.add_option("--seq-len", f.seq_len, "Tokens per document after truncation/padding")
      ->default_str(str(d.model.seq_len));
  cmd.add_option("--epochs", f.epochs, "Maximum training epochs")->default_str(str(d.epochs));
  cmd.add_option("--seed", f.seed, "Seed for initialization and shuffling")
      ->default_str(str(d.init_seed));
  cmd.add_option("--out", f.out, "Output directory")->default_str(d.out_dir);
  cmd.add_option("--batch-size", f.batch_size, "Minibatch size")->default_str(str(d.batch_size));
  cmd.add_option("--embed", f.embed_dim, "Word embedding width")
      ->default_str(str(d.model.embed_dim));
  cmd.add_option("--hidden", f.hidden_dim, "Recurrent hidden width per direction")
      ->default_str(str(d.model.hidden_dim));
  cmd.add_option("--filters", f.num_filters, "Convolution filters per window")
      ->default_str(str(d.model.num_filters));
  cmd.add_option("--highway", f.highway_layers, "Highway blocks (rcnn-hw)")
      ->default_str(str(d.model.highway_layers));
  cmd.add_option("--optimizer", f.optimizer, "rmsprop, adam or adadelta")
      ->default_str(to_string(d.optimizer.kind));
  cmd.add_option("--lr", f.lr, "Learning rate (default depends on optimizer: 1e-3, or 1.0 for adadelta)");
  cmd.add_option("--val-fraction", f.val_fraction, "Share of training data held out for validation")
      ->default_str(str(d.val_fraction));
  cmd.add_option("--patience", f.patience, "Epochs without validation gain before stopping (0 = off)")
      ->default_str(str(d.patience));
  cmd.add_option("--clip-norm", f.clip_norm,
                 "Global gradient-norm clip; 0 = off (default 5 for recurrent models, off otherwise)");
  cmd.add_option("--vocab-size", f.vocab_max_size, "Maximum vocabulary size including PAD/UNK")
      ->default_str(str(d.vocab_max_size));
  cmd.add_option("--min-freq", f.vocab_min_freq, "Minimum token count to enter the vocabulary")
      ->default_str(str(d.vocab_min_freq));
}

inline Json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  try {
    return Json::parse(is);
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
}

/// defaults < JSON config < flags.
inline TrainConfig resolve_config(const TrainFlags& f) {
  TrainConfig c;
  if (!f.config_path.empty()) merge_json(read_json_file(f.config_path), c);
  if (f.model) c.model.kind = parse_model_kind(*f.model);
  if (f.seq_len) c.model.seq_len = *f.seq_len;
  if (f.epochs) c.epochs = *f.epochs;
  if (f.seed) {
    c.init_seed = *f.seed;
    c.shuffle_seed = *f.seed + 1;
  }
  if (f.out) c.out_dir = *f.out;
  if (f.batch_size) c.batch_size = *f.batch_size;
  if (f.embed_dim) c.model.embed_dim = *f.embed_dim;
  if (f.hidden_dim) c.model.hidden_dim = *f.hidden_dim;
  if (f.num_filters) c.model.num_filters = *f.num_filters;
  if (f.highway_layers) c.model.highway_layers = *f.highway_layers;
  if (f.optimizer) c.optimizer.kind = parse_optimizer_kind(*f.optimizer);
  if (f.lr) c.optimizer.lr = *f.lr;
  if (f.val_fraction) c.val_fraction = *f.val_fraction;
  if (f.patience) c.patience = *f.patience;
  if (f.clip_norm) c.clip_norm = *f.clip_norm;
  if (f.vocab_max_size) c.vocab_max_size = *f.vocab_max_size;
  if (f.vocab_min_freq) c.vocab_min_freq = *f.vocab_min_freq;
  c.validate();
  if (c.model.seq_len < 1) throw ConfigError("seq_len must be >= 1");
  return c;
}

/// Flattens a JSON object into sorted "a.b=value" lines.
inline void flatten(const Json& j, const std::string& prefix, std::ostream& os) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), os);
    }
  } else {
    os << prefix << '=' << (j.is_string() ? j.get<std::string>() : j.dump()) << '\n';
  }
}

/// Writes the resolved config as key=value lines. Model fields appear both
/// nested and under the short names hidden / filters.
inline void echo_config(const TrainConfig& c, std::ostream& os) {
  os << "# resolved config\n";
  flatten(to_json(c), "", os);
  os << "hidden=" << c.model.hidden_dim
     << "\nfilters=" << c.model.num_filters << '\n';
}

struct Splits {
  TextDataset train;
  TextDataset test;
};

/// IMDB directory → its own train/test; TSV → --test-data or a seeded split.
inline Splits load_splits(const TrainFlags& f, std::uint64_t seed) {
  const std::filesystem::path p(f.data);
  if (std::filesystem::is_directory(p)) {
    auto [train, test] = load_imdb_dir(p);
    return {std::move(train), std::move(test)};
  }
  TextDataset all = load_tsv(p);
  if (!f.test_data.empty()) return {std::move(all), load_tsv(f.test_data)};
  auto [train, test] = split_validation(all, f.test_fraction, derive_seed(seed, 0x7e57));
  return {std::move(train), std::move(test)};
}

inline TextDataset load_eval_data(const std::string& path) {
  const std::filesystem::path p(path);
  if (std::filesystem::is_directory(p)) return load_imdb_dir(p).second;
  return load_tsv(p);
}

inline std::vector<std::size_t> parse_lengths(const std::string& list) {
  std::vector<std::size_t> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    if (b == std::string::npos) continue;
    item = item.substr(b, item.find_last_not_of(' ') - b + 1);
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      if (item.front() == '-') throw std::invalid_argument(item);
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("sequence length '" + item + "' is not a positive integer");
    }
    if (used != item.size() || v == 0) {
      throw ConfigError("sequence length '" + item + "' is not a positive integer");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("empty length list");
  return out;
}

inline std::string fmt_acc(std::optional<double> v) {
  if (!v) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << *v;
  return os.str();
}

inline EpochObserver epoch_logger(std::ostream& err, const std::string& tag) {
  return [&err, tag](const EpochRecord& r) {
    err << tag << "epoch " << r.epoch << " loss=" << std::setprecision(6) << r.train_loss
        << " train_acc=" << r.train_accuracy;
    if (r.val_accuracy) err << " val_acc=" << *r.val_accuracy;
    err << " (" << std::setprecision(3) << r.seconds << "s)\n" << std::setprecision(6);
  };
}

}  // namespace cli_detail

/// Entry point. Machine-readable results go to `out`, logs and errors to
/// `err`. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  CLI::App app{"RCNN-HW text classification lab", "rcnnhw"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersionTag);

  // train
  TrainFlags train_f;
  bool dry_run = false;
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model and write checkpoint + report");
  add_train_flags(*train_cmd, train_f, true);
  train_cmd->add_flag("--dry-run", dry_run, "Resolve and print the config, then exit");

  // eval
  std::string eval_ckpt, eval_data, eval_vocab;
  std::optional<std::size_t> eval_seq_len;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score a checkpoint; prints accuracy=<value>");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file (.rchw)")->required();
  eval_cmd->add_option("--data", eval_data, "TSV file or IMDB directory (its test split)")
      ->required();
  eval_cmd->add_option("--seq-len", eval_seq_len,
                       "Must equal the checkpoint's sequence length if given");
  eval_cmd->add_option("--vocab", eval_vocab,
                       "Vocabulary file; default is the vocabulary stored in the checkpoint");

  // compare
  TrainFlags cmp_f;
  std::string cmp_models = "all";
  std::string cmp_lengths;
  CLI::App* cmp_cmd =
      app.add_subcommand("compare", "Train several architectures on identical data and seeds");
  add_train_flags(*cmp_cmd, cmp_f, false);
  cmp_cmd->add_option("--models", cmp_models,
                      "Comma list of kinds; 'architectures' = every architecture, "
                      "'rcnn-hw-ablation' = highway ablation rows, 'all' = both")
      ->capture_default_str();
  cmp_cmd->add_option("--lengths", cmp_lengths,
                      "Comma list of sequence lengths; each model keeps its best (default: --seq-len)");

  // sweep
  TrainFlags sweep_f;
  std::string sweep_models = "rcnn-hw";
  std::string sweep_lengths = "100,200,300,400,500";
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Retrain across sequence lengths");
  add_train_flags(*sweep_cmd, sweep_f, false);
  sweep_cmd->add_option("--model", sweep_models, "Model kind or comma list of kinds")
      ->capture_default_str();
  sweep_cmd->add_option("--lengths", sweep_lengths, "Strictly ascending comma list")
      ->capture_default_str();

  // gradcheck
  std::string gc_scope = "layer";
  std::uint64_t gc_seed = 0;
  bool gc_fault = false;
  CLI::App* gc_cmd =
      app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gc_cmd->add_option("--scope", gc_scope, "layer or model")
      ->capture_default_str()
      ->check(CLI::IsMember({"layer", "model"}));
  gc_cmd->add_option("--seed", gc_seed, "Base seed for the random draws")->capture_default_str();
  gc_cmd->add_flag("--inject-fault", gc_fault, "Add a target with a broken backward rule")
      ->group("");

  // gen
  std::string gen_task;
  std::size_t gen_n = 1000;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  std::size_t gen_vocab = 100;
  std::size_t gen_len = 50;
  std::size_t gen_lo = 200, gen_hi = 400;
  CLI::App* gen_cmd = app.add_subcommand("gen", "Write a synthetic TSV dataset");
  gen_cmd->add_option("--task", gen_task, "keyword, order or longrange")->required();
  gen_cmd->add_option("--n", gen_n, "Number of examples")->capture_default_str();
  gen_cmd->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "Output TSV path")->required();
  gen_cmd->add_option("--vocab-size", gen_vocab, "Filler vocabulary size")->capture_default_str();
  gen_cmd->add_option("--length", gen_len,
                      "Tokens per document (keyword/order default 50; longrange uses 500 unless set)");
  gen_cmd->add_option("--window-lo", gen_lo, "longrange: first signal position")
      ->capture_default_str();
  gen_cmd->add_option("--window-hi", gen_hi, "longrange: one past the last signal position")
      ->capture_default_str();

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      CLI::App* target = &app;
      for (CLI::App* sub : app.get_subcommands()) target = sub;
      out << target->help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::CallForVersion&) {
      out << kVersionTag << '\n';
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << '\n';
      return kExitConfig;
    }

    if (train_cmd->parsed()) {
      TrainConfig c = resolve_config(train_f);
      echo_config(c, err);
      if (dry_run) {
        echo_config(c, out);
        return kExitOk;
      }
      Splits s = load_splits(train_f, c.init_seed);
      err << "train=" << s.train.size() << " test=" << s.test.size() << " examples\n";
      Experiment ex = run_experiment(c, s.train, s.test, epoch_logger(err, ""));
      const std::filesystem::path dir(c.out_dir);
      std::filesystem::create_directories(dir);
      save_checkpoint(ex.result.model, dir / "model.rchw", &ex.vocab);
      ex.vocab.save(dir / "vocab.txt");
      write_text_file(dir / "report.json", ex.result.report.to_json(train_f.timing).dump(2) + "\n");
      out << "best_val_accuracy=" << fmt_acc(ex.result.report.best_val_accuracy) << '\n';
      out << "test_accuracy=" << fmt_acc(ex.result.report.test_accuracy) << '\n';
      return kExitOk;
    }

    if (eval_cmd->parsed()) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      if (eval_seq_len && *eval_seq_len != ck.model.spec.seq_len) {
        throw ConfigError("--seq-len " + std::to_string(*eval_seq_len) +
                          " does not match the checkpoint's seq_len " +
                          std::to_string(ck.model.spec.seq_len));
      }
      Vocabulary vocab;
      if (!eval_vocab.empty()) {
        vocab = Vocabulary::load(eval_vocab);
      } else if (ck.vocab) {
        vocab = *ck.vocab;
      } else {
        throw ConfigError("checkpoint has no vocabulary; pass --vocab");
      }
      if (vocab.size() != ck.model.spec.vocab_size) {
        throw ConfigError("vocabulary size " + std::to_string(vocab.size()) +
                          " does not match the checkpoint's " +
                          std::to_string(ck.model.spec.vocab_size));
      }
      const TextDataset data = load_eval_data(eval_data);
      const double acc = evaluate(ck.model, data, vocab, ck.model.spec.seq_len);
      out << "accuracy=" << fmt_acc(acc) << '\n';
      return kExitOk;
    }

    if (cmp_cmd->parsed()) {
      TrainConfig c = resolve_config(cmp_f);
      echo_config(c, err);
      const auto entries = parse_comparison_entries(cmp_models);
      const auto lengths =
          cmp_lengths.empty() ? std::vector<std::size_t>{} : parse_lengths(cmp_lengths);
      Splits s = load_splits(cmp_f, c.init_seed);
      ComparisonTable table = run_model_comparison(c, entries, s.train, s.test, lengths);
      const std::filesystem::path dir(c.out_dir);
      std::ostringstream csv;
      table.write_csv(csv, cmp_f.timing);
      write_text_file(dir / "comparison.csv", csv.str());
      Json j = table.to_json(cmp_f.timing);
      j["config"] = to_json(c);
      j["version"] = kVersionTag;
      write_text_file(dir / "comparison.json", j.dump(2) + "\n");
      out << csv.str();
      for (const ComparisonRow& r : table.rows) {
        if (!r.error.empty()) err << r.entry.label << ": " << r.error << '\n';
      }
      return kExitOk;
    }

    if (sweep_cmd->parsed()) {
      TrainConfig c = resolve_config(sweep_f);
      const auto lengths = parse_lengths(sweep_lengths);
      echo_config(c, err);
      std::vector<ComparisonEntry> models;
      for (const ComparisonEntry& e : parse_comparison_entries(sweep_models)) {
        models.push_back(e);
      }
      Splits s = load_splits(sweep_f, c.init_seed);
      SweepTable table = run_seqlen_sweep(c, models, s.train, s.test, lengths);
      const std::filesystem::path dir(c.out_dir);
      std::ostringstream csv;
      table.write_csv(csv, sweep_f.timing);
      write_text_file(dir / "sweep.csv", csv.str());
      Json j = table.to_json(sweep_f.timing);
      j["config"] = to_json(c);
      j["version"] = kVersionTag;
      write_text_file(dir / "sweep.json", j.dump(2) + "\n");
      out << csv.str();
      for (const SweepRow& r : table.rows) {
        if (!r.error.empty()) err << r.model << " L=" << r.seq_len << ": " << r.error << '\n';
      }
      return kExitOk;
    }

    if (gc_cmd->parsed()) {
      const GradCheckReport report = gc_scope == "model" ? run_model_gradchecks(gc_seed)
                                                         : run_layer_gradchecks(gc_seed, gc_fault);
      report.print(out);
      if (!report.passed()) {
        throw CheckFailure("gradient check exceeded tolerance " + str(kGradCheckTolerance));
      }
      out << "gradcheck=ok\n";
      return kExitOk;
    }

    if (gen_cmd->parsed()) {
      TextDataset ds;
      if (gen_task == "keyword") {
        ds = gen_keyword_task(gen_n, gen_vocab, gen_len, gen_seed);
      } else if (gen_task == "order") {
        ds = gen_order_task(gen_n, gen_vocab, gen_len, gen_seed);
      } else if (gen_task == "longrange") {
        const std::size_t len = gen_cmd->count("--length") ? gen_len : 500;
        ds = gen_longrange_task(gen_n, {gen_lo, gen_hi}, len, gen_seed, gen_vocab);
      } else {
        throw ConfigError("unknown task '" + gen_task + "'; valid: keyword, order, longrange");
      }
      save_tsv(ds, gen_out);
      out << "wrote=" << ds.size() << '\n';
      return kExitOk;
    }
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitData;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const CheckFailure& e) {
    err << "verification failed: " << e.what() << '\n';
    return kExitVerification;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace rcnnhw
