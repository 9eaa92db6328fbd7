// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rcnnhw/errors.hpp"

namespace rcnnhw {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kUnkId = 1;

/// Fixed-length token ids for a batch of examples, row-major
/// [batch × seq_len]. Positions at or beyond lengths[i] hold kPadId.
struct EncodedBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;

  std::size_t id(std::size_t example, std::size_t position) const {
    return ids[example * seq_len + position];
  }

  void validate() const {
    if (ids.size() != batch * seq_len || lengths.size() != batch ||
        (!labels.empty() && labels.size() != batch)) {
      throw ContractError("EncodedBatch: inconsistent sizes");
    }
    for (std::size_t i = 0; i < batch; ++i) {
      if (lengths[i] < 1 || lengths[i] > seq_len) {
        throw ContractError("EncodedBatch: length " + std::to_string(lengths[i]) +
                            " of example " + std::to_string(i) +
                            " outside [1, seq_len]");
      }
    }
  }
};

}  // namespace rcnnhw
