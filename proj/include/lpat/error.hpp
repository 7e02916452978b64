#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lpat {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is invalid or inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A softmax row had no finite entry.
class DegenerateRowError : public Error {
 public:
  DegenerateRowError(std::size_t row)
      : Error("softmax row " + std::to_string(row) + " has no finite entry"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Malformed weight archive or data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value met during a numerical check or training step.
class InstabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace lpat
