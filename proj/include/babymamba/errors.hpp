#pragma once

#include <stdexcept>
#include <string>

namespace bm {

// Exit codes used by the CLI for each error family.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kInternal = 5,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode code() const noexcept { return ExitCode::kInternal; }
};

// Bad configuration: invalid extents, unsupported kernel sizes, channel mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kConfig; }
};

// Shape mismatch between operands.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Violated precondition of an operation (e.g. non-scalar root for backward).
class ContractError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kInternal; }
};

// Malformed input files, schema violations, split-protocol misuse.
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kData; }
};

class ProtocolError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode code() const noexcept override { return ExitCode::kNumeric; }
};

}  // namespace bm
