// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rcnnhw/batch.hpp"
#include "rcnnhw/errors.hpp"
#include "rcnnhw/random.hpp"

namespace rcnnhw {

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

namespace detail {

// Length of a UTF-8 whitespace sequence starting at s[i], or 0.
inline std::size_t utf8_space_len(std::string_view s, std::size_t i) {
  const auto b = [&](std::size_t k) {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u;
  };
  const unsigned c = b(0);
  if (c == ' ' || (c >= '\t' && c <= '\r')) return 1;
  if (c == 0xC2 && (b(1) == 0x85 || b(1) == 0xA0)) return 2;  // NEL, NBSP
  if (c == 0xE1 && b(1) == 0x9A && b(2) == 0x80) return 3;    // U+1680
  if (c == 0xE2 && b(1) == 0x80 &&
      ((b(2) >= 0x80 && b(2) <= 0x8A) || b(2) == 0xA8 || b(2) == 0xA9 || b(2) == 0xAF)) {
    return 3;  // U+2000..U+200A, U+2028, U+2029, U+202F
  }
  if (c == 0xE2 && b(1) == 0x81 && b(2) == 0x9F) return 3;  // U+205F
  if (c == 0xE3 && b(1) == 0x80 && b(2) == 0x80) return 3;  // U+3000
  return 0;
}

inline bool is_ascii_punct(unsigned char c) {
  return c < 0x80 && std::ispunct(c);
}

// Replaces <br>, <br/>, <br /> (any case) with a space.
inline std::string strip_line_breaks(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    if (text[i] == '<' && i + 2 < text.size() &&
        std::tolower(static_cast<unsigned char>(text[i + 1])) == 'b' &&
        std::tolower(static_cast<unsigned char>(text[i + 2])) == 'r') {
      std::size_t j = i + 3;
      while (j < text.size() && text[j] == ' ') ++j;
      if (j < text.size() && text[j] == '/') ++j;
      if (j < text.size() && text[j] == '>') {
        out.push_back(' ');
        i = j + 1;
        continue;
      }
    }
    out.push_back(text[i++]);
  }
  return out;
}

}  // namespace detail

/// Lowercases, drops HTML line breaks, splits every ASCII punctuation
/// character into its own token and splits on Unicode whitespace.
inline std::vector<std::string> tokenize(std::string_view text) {
  const std::string clean = detail::strip_line_breaks(text);
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < clean.size();) {
    if (const std::size_t n = detail::utf8_space_len(clean, i)) {
      flush();
      i += n;
      continue;
    }
    const auto c = static_cast<unsigned char>(clean[i]);
    if (detail::is_ascii_punct(c)) {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
    ++i;
  }
  flush();
  return tokens;
}

/// True if `s` is well-formed UTF-8 (no overlongs, surrogates or > U+10FFFF).
inline bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t n;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      n = 1, cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      n = 2, cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      n = 3, cp = c & 0x07;
    } else {
      return false;
    }
    if (i + n >= s.size()) return false;
    for (std::size_t k = 1; k <= n; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if ((n == 1 && cp < 0x80) || (n == 2 && cp < 0x800) || (n == 3 && cp < 0x10000)) return false;
    if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += n + 1;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Example {
  std::string text;
  int label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct TextDataset {
  std::vector<Example> examples;
  std::string split;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

inline void write_tsv(const TextDataset& ds, std::ostream& os) {
  for (const Example& e : ds.examples) {
    std::string text = e.text;
    std::replace(text.begin(), text.end(), '\t', ' ');
    std::replace(text.begin(), text.end(), '\n', ' ');
    os << e.label << '\t' << text << '\n';
  }
}

inline void save_tsv(const TextDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  write_tsv(ds, os);
}

/// Parses "label<TAB>text" lines; blank lines are skipped.
inline TextDataset parse_tsv(std::istream& is, const std::string& source = "<stream>") {
  TextDataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::size_t tab = line.find('\t');
    const std::string where = source + ":" + std::to_string(lineno);
    if (tab == std::string::npos) throw DataError(where + ": expected label<TAB>text");
    const std::string label = line.substr(0, tab);
    if (label != "0" && label != "1") {
      throw DataError(where + ": label must be 0 or 1, got '" + label + "'");
    }
    std::string text = line.substr(tab + 1);
    if (text.find_first_not_of(" \t") == std::string::npos) {
      throw DataError(where + ": empty text");
    }
    if (!is_valid_utf8(text)) throw DataError(where + ": text is not valid UTF-8");
    ds.examples.push_back({std::move(text), label == "1" ? 1 : 0});
  }
  return ds;
}

inline TextDataset load_tsv(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  TextDataset ds = parse_tsv(is, path.string());
  ds.split = path.stem().string();
  return ds;
}

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void load_label_dir(const std::filesystem::path& dir, int label, TextDataset& ds) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("missing directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) {
              return a.filename().string() < b.filename().string();
            });
  for (const fs::path& f : files) {
    std::string text = read_file(f);
    if (!is_valid_utf8(text)) throw DataError("file is not valid UTF-8: " + f.string());
    ds.examples.push_back({std::move(text), label});
  }
}

}  // namespace detail

/// Reads root/{train,test}/{pos,neg}/ (one review per file). Within a split,
/// positive files come first, each label directory in sorted filename order.
inline std::pair<TextDataset, TextDataset> load_imdb_dir(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw IoError("missing directory " + root.string());
  auto load_split = [&](const std::string& split) {
    TextDataset ds;
    ds.split = split;
    detail::load_label_dir(root / split / "pos", 1, ds);
    detail::load_label_dir(root / split / "neg", 0, ds);
    return ds;
  };
  return {load_split("train"), load_split("test")};
}

/// Mean token count over a dataset.
inline double mean_token_length(const TextDataset& ds) {
  if (ds.empty()) return 0.0;
  double total = 0.0;
  for (const Example& e : ds.examples) total += static_cast<double>(tokenize(e.text).size());
  return total / static_cast<double>(ds.size());
}

/// Deterministic split of `ds` into (train, validation) with a seeded shuffle.
inline std::pair<TextDataset, TextDataset> split_validation(const TextDataset& ds,
                                                            double fraction,
                                                            std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) {
    throw ConfigError("validation fraction must be in [0, 1)");
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_val = static_cast<std::size_t>(fraction * static_cast<double>(ds.size()));
  TextDataset train, val;
  train.split = ds.split + "-train";
  val.split = ds.split + "-val";
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val : train).examples.push_back(ds.examples[order[i]]);
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Vocabulary and encoding
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary() : tokens_{kPadToken, kUnkToken}, index_{{kPadToken, kPadId}, {kUnkToken, kUnkId}} {}

  /// Content tokens in id order (ids 2, 3, ...).
  static Vocabulary from_tokens(const std::vector<std::string>& content) {
    Vocabulary v;
    for (const std::string& t : content) {
      if (v.index_.contains(t)) throw DataError("duplicate vocabulary token '" + t + "'");
      v.index_.emplace(t, v.tokens_.size());
      v.tokens_.push_back(t);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::vector<std::string> content_tokens() const {
    return {tokens_.begin() + 2, tokens_.end()};
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_;
  }

  /// One content token per line; line n holds id n + 1.
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    for (std::size_t i = 2; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::string> content;
    std::string line;
    while (std::getline(is, line)) content.push_back(line);
    return from_tokens(content);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Ranks training tokens by frequency (ties lexicographic), keeps those seen
/// at least min_freq times, up to max_size − 2 content tokens.
inline Vocabulary build_vocab(const TextDataset& train, std::size_t max_size = 20000,
                              std::size_t min_freq = 2) {
  if (train.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  if (max_size < 2) throw ConfigError("vocabulary max_size must be >= 2");
  std::map<std::string, std::size_t> counts;
  for (const Example& e : train.examples) {
    for (std::string& t : tokenize(e.text)) ++counts[std::move(t)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_freq) ranked.emplace_back(tok, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size - 2) ranked.resize(max_size - 2);
  std::vector<std::string> content;
  content.reserve(ranked.size());
  for (auto& [tok, n] : ranked) content.push_back(tok);
  return Vocabulary::from_tokens(content);
}

enum class Truncation { head, tail };

struct EncodedText {
  std::vector<std::size_t> ids;
  std::size_t length = 0;
};

/// Maps tokens to ids and fits them to seq_len: longer inputs keep the first
/// (head) or last (tail) seq_len tokens, shorter ones are padded at the end.
/// An empty token list encodes as [UNK, PAD, ...] with length 1.
inline EncodedText encode_tokens(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                 std::size_t seq_len, Truncation trunc = Truncation::head) {
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  EncodedText out;
  out.ids.assign(seq_len, kPadId);
  if (tokens.empty()) {
    out.ids[0] = kUnkId;
    out.length = 1;
    return out;
  }
  const std::size_t n = std::min(tokens.size(), seq_len);
  const std::size_t start = trunc == Truncation::head ? 0 : tokens.size() - n;
  for (std::size_t i = 0; i < n; ++i) out.ids[i] = vocab.id(tokens[start + i]);
  out.length = n;
  return out;
}

inline EncodedText encode(std::string_view text, const Vocabulary& vocab, std::size_t seq_len,
                          Truncation trunc = Truncation::head) {
  return encode_tokens(tokenize(text), vocab, seq_len, trunc);
}

/// A whole dataset encoded once at a fixed length.
struct EncodedDataset {
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;  // [n × seq_len]
  std::vector<std::size_t> lengths;
  std::vector<int> labels;

  std::size_t size() const { return lengths.size(); }

  EncodedBatch gather(std::span<const std::size_t> rows) const {
    EncodedBatch b;
    b.batch = rows.size();
    b.seq_len = seq_len;
    b.ids.reserve(rows.size() * seq_len);
    for (std::size_t r : rows) {
      b.ids.insert(b.ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(r * seq_len),
                   ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq_len));
      b.lengths.push_back(lengths[r]);
      b.labels.push_back(labels[r]);
    }
    return b;
  }
};

inline EncodedDataset encode_dataset(const TextDataset& ds, const Vocabulary& vocab,
                                     std::size_t seq_len, Truncation trunc = Truncation::head) {
  EncodedDataset out;
  out.seq_len = seq_len;
  out.ids.reserve(ds.size() * seq_len);
  for (const Example& e : ds.examples) {
    EncodedText enc = encode(e.text, vocab, seq_len, trunc);
    out.ids.insert(out.ids.end(), enc.ids.begin(), enc.ids.end());
    out.lengths.push_back(enc.length);
    out.labels.push_back(e.label);
  }
  return out;
}

/// Splits an encoded dataset into batches of `batch_size` (last one short).
/// With a shuffle seed, the order is a seeded permutation that differs per
/// epoch; without one, dataset order is kept.
inline std::vector<EncodedBatch> make_batches(const EncodedDataset& ds, std::size_t batch_size,
                                              std::optional<std::uint64_t> shuffle_seed,
                                              std::size_t epoch = 0) {
  if (ds.size() == 0) throw ContractError("cannot batch an empty dataset");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    Rng rng(derive_seed(*shuffle_seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
  }
  std::vector<EncodedBatch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - i);
    out.push_back(ds.gather(std::span<const std::size_t>(order).subspan(i, n)));
  }
  return out;
}

/// Convenience form taking raw text.
inline std::vector<EncodedBatch> batches(const TextDataset& ds, const Vocabulary& vocab,
                                         std::size_t seq_len, std::size_t batch_size,
                                         std::optional<std::uint64_t> shuffle_seed,
                                         std::size_t epoch = 0) {
  if (ds.empty()) throw ContractError("cannot batch an empty dataset");
  return make_batches(encode_dataset(ds, vocab, seq_len), batch_size, shuffle_seed, epoch);
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

inline constexpr const char* kKeywordPositive = "kwpos";
inline constexpr const char* kKeywordNegative = "kwneg";
inline constexpr const char* kOrderFirst = "marka";
inline constexpr const char* kOrderSecond = "markb";

namespace detail {

inline std::string filler(Rng& rng, std::size_t vocab_size) {
  return "w" + std::to_string(rng.below(vocab_size));
}

inline std::string join(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

}  // namespace detail

/// Random filler sequences; a fair coin decides the label and positives get
/// kwpos at a uniform position.
inline TextDataset gen_keyword_task(std::size_t n, std::size_t vocab_size = 100,
                                    std::size_t seq_len = 50, std::uint64_t seed = 0) {
  if (seq_len < 3) throw ConfigError("keyword task needs seq_len >= 3");
  if (vocab_size < 1) throw ConfigError("keyword task needs vocab_size >= 1");
  Rng rng(seed);
  TextDataset ds;
  ds.split = "keyword";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> toks(seq_len);
    for (auto& t : toks) t = detail::filler(rng, vocab_size);
    const int label = static_cast<int>(rng.below(2));
    if (label == 1) toks[rng.below(seq_len)] = kKeywordPositive;
    ds.examples.push_back({detail::join(toks), label});
  }
  return ds;
}

/// Every example holds marka and markb once each at distinct random
/// positions; label 1 iff marka comes first. Labels alternate, so classes are
/// exactly balanced and the token multiset carries no label information.
inline TextDataset gen_order_task(std::size_t n, std::size_t vocab_size = 100,
                                  std::size_t seq_len = 50, std::uint64_t seed = 0) {
  if (seq_len < 4) throw ConfigError("order task needs seq_len >= 4");
  if (vocab_size < 1) throw ConfigError("order task needs vocab_size >= 1");
  Rng rng(seed);
  TextDataset ds;
  ds.split = "order";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> toks(seq_len);
    for (auto& t : toks) t = detail::filler(rng, vocab_size);
    std::size_t p = rng.below(seq_len);
    std::size_t q = rng.below(seq_len - 1);
    if (q >= p) ++q;
    if (p > q) std::swap(p, q);
    const int label = static_cast<int>((i + 1) % 2);
    toks[p] = label == 1 ? kOrderFirst : kOrderSecond;
    toks[q] = label == 1 ? kOrderSecond : kOrderFirst;
    ds.examples.push_back({detail::join(toks), label});
  }
  return ds;
}

/// Documents of seq_len filler tokens with one label sentinel (kwpos or
/// kwneg) placed uniformly in [lo, hi). Encoding with a cap <= lo drops it.
inline TextDataset gen_longrange_task(std::size_t n, std::pair<std::size_t, std::size_t> window,
                                      std::size_t seq_len, std::uint64_t seed = 0,
                                      std::size_t vocab_size = 100) {
  const auto [lo, hi] = window;
  if (!(lo < hi && hi <= seq_len)) {
    throw ConfigError("longrange task needs 0 <= lo < hi <= seq_len, got [" +
                      std::to_string(lo) + "," + std::to_string(hi) + ") with seq_len " +
                      std::to_string(seq_len));
  }
  if (vocab_size < 1) throw ConfigError("longrange task needs vocab_size >= 1");
  Rng rng(seed);
  TextDataset ds;
  ds.split = "longrange";
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> toks(seq_len);
    for (auto& t : toks) t = detail::filler(rng, vocab_size);
    const int label = static_cast<int>(rng.below(2));
    toks[lo + rng.below(hi - lo)] = label == 1 ? kKeywordPositive : kKeywordNegative;
    ds.examples.push_back({detail::join(toks), label});
  }
  return ds;
}

}  // namespace rcnnhw
