// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "rcnnhw/config.hpp"
#include "rcnnhw/data.hpp"
#include "rcnnhw/models.hpp"

namespace rcnnhw {

// Layout:
//   "RCHW" | u32 version | u64 header length | JSON header | tensor data
// Integers and doubles are little-endian. The header holds the model spec, a
// manifest of {name, shape, offset} (byte offsets into the data section, in
// parameter order) and optionally the vocabulary.

inline constexpr char kCheckpointMagic[4] = {'R', 'C', 'H', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::optional<Vocabulary> vocab;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(const std::string& in, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model,
                                        const Vocabulary* vocab = nullptr) {
  Json manifest = Json::array();
  std::string data;
  model.for_each_parameter([&](const std::string& name, const Parameter& p) {
    manifest.push_back({{"name", name}, {"shape", p.value.shape()}, {"offset", data.size()}});
    for (double v : p.value.data()) detail::put_le(data, std::bit_cast<std::uint64_t>(v));
  });
  Json header{{"spec", to_json(model.spec)}, {"tensors", manifest}};
  if (vocab) header["vocab"] = vocab->content_tokens();
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  out += data;
  return out;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const Vocabulary* vocab = nullptr) {
  const std::string bytes = serialize_checkpoint(model, vocab);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint: bad magic bytes");
  }
  if (bytes.size() < 16) throw TruncatedFileError("checkpoint truncated in preamble");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version) +
                       " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = detail::get_le<std::uint64_t>(bytes, 8);
  if (bytes.size() - 16 < header_len) throw TruncatedFileError("checkpoint truncated in header");
  Json header;
  try {
    header = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t data_start = 16 + header_len;

  Checkpoint ck;
  try {
    ck.model = build_model(model_spec_from_json(header.at("spec")), 0);
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint header lacks a spec: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint spec is invalid: ") + e.what());
  }
  const Json& tensors = header.at("tensors");
  std::vector<NamedParameter> params = ck.model.parameters();
  if (!tensors.is_array() || tensors.size() != params.size()) {
    throw ShapeMismatchError("checkpoint lists " + std::to_string(tensors.size()) +
                             " tensors, spec requires " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Json& t = tensors[i];
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    Parameter& p = *params[i].param;
    if (name != params[i].name || shape != p.value.shape()) {
      throw ShapeMismatchError("checkpoint tensor '" + name + "' " + shape_str(shape) +
                               " does not match expected '" + params[i].name + "' " +
                               shape_str(p.value.shape()));
    }
    const std::size_t need = p.value.size() * 8;
    if (data_start + offset + need > bytes.size()) {
      throw TruncatedFileError("checkpoint truncated in tensor '" + name + "'");
    }
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      p.value[k] = std::bit_cast<double>(
          detail::get_le<std::uint64_t>(bytes, data_start + offset + 8 * k));
    }
  }
  if (header.contains("vocab")) {
    ck.vocab = Vocabulary::from_tokens(header["vocab"].get<std::vector<std::string>>());
    if (ck.vocab->size() != ck.model.spec.vocab_size) {
      throw ShapeMismatchError("checkpoint vocabulary size does not match spec");
    }
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes);
}

}  // namespace rcnnhw
