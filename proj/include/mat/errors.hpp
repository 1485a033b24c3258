#pragma once

#include <stdexcept>
#include <string>

namespace mat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an op's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input outside an op's mathematical domain (e.g. softmax over an empty axis).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (unknown key, inconsistent sizes, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or out-of-range data (annotation rows, labels, lookups).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Binary file with a wrong magic/version or an inconsistent manifest.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Binary file that ends before its declared payload.
class IntegrityError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kData = 2;
inline constexpr int kNumeric = 3;
}  // namespace exit_code

/// Maps an exception to the CLI exit code convention (0 ok, 1 usage, 2 data/config, 3 numeric).
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return exit_code::kNumeric;
  return exit_code::kData;
}

}  // namespace mat
