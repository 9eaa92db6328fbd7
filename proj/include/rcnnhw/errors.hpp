// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rcnnhw {

// Failure classes. The CLI maps each one to a distinct exit code.

/// Shapes that cannot be combined by the requested operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition was violated (empty axis, non-scalar loss, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid model/training configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed input data: bad labels, out-of-range ids, non-UTF-8 text.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Missing or unreadable files and directories.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint container problems. Subclasses let callers tell them apart.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : FormatError {
  using FormatError::FormatError;
};
struct ShapeMismatchError : FormatError {
  using FormatError::FormatError;
};
struct TruncatedFileError : FormatError {
  using FormatError::FormatError;
};

/// Training produced a non-finite loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A gradient check exceeded its tolerance or hit a non-finite value.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rcnnhw
