#pragma once

#include <stdexcept>
#include <string>

namespace curate {

/// Bad argument to an operation (wrong shape, out-of-range index, bad fps).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data violates a domain invariant (NaN payload, zero-norm row, empty class).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk representation.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// I/O failure; the message carries the locator.
class StorageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimisation blew up.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace curate
