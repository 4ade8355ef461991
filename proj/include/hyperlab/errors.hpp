#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hyperlab {

// Root of every error raised by the library. The CLI maps subclasses onto
// exit codes (config 2, numeric 3, I/O 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised when an embedding row is too short to normalize.
class DegenerateEmbeddingError : public NumericError {
 public:
  DegenerateEmbeddingError(std::size_t row, double norm)
      : NumericError("degenerate embedding at row " + std::to_string(row) +
                     " (norm " + std::to_string(norm) + ")"),
        row_(row),
        norm_(norm) {}

  std::size_t row() const { return row_; }
  double norm() const { return norm_; }

 private:
  std::size_t row_;
  double norm_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hyperlab
