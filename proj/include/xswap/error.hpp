#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace xswap {

// Every failure the library reports derives from Error, so callers (notably
// the CLI) can map the whole family onto exit codes in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration values: unsupported resolutions, invalid counts, unknown keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor or container dimensions that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An operation called on a component that has not been loaded or configured.
class StateError : public Error {
 public:
  using Error::Error;
};

// Invalid function arguments (empty batches, zero-norm vectors, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Non-finite values detected during evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Divergence during an optimization loop; carries the failing step.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::int64_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

// Malformed or unsupported files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace xswap
