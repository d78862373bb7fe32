#pragma once

#include <stdexcept>
#include <string>

namespace azgan {

/// Base for every error raised by the library. The CLI maps subclasses to
/// exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on call order or state was violated (e.g. backward on a
/// non-scalar, optimizer step without gradients).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Not enough data to do the requested work (too few images, no combinations,
/// a single class for a classifier).
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Requested render or chip extent cannot hold the target.
class ExtentError : public Error {
 public:
  using Error::Error;
};

/// Batch norm asked to normalize fewer than two values per channel.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Configuration failed validation; the message lists every violation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A required upstream artifact is missing.
class DependencyError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient went non-finite during training.
class NumericalAbort : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace azgan
