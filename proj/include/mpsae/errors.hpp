#pragma once

#include <stdexcept>
#include <string>

namespace mpsae {

// Base for every error raised by the library. The CLI maps the subclasses
// onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree, or a matrix lacks a required structure
// (e.g. symmetry).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Requested dimensions cannot be satisfied (e.g. n > m for a basis).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of the operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Every input was filtered out, leaving nothing to aggregate.
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// A structural invariant of a model/dictionary is violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

class SingularError : public Error {
 public:
  using Error::Error;
};

// Rejection sampler could not reach its target distribution.
class RejectionBudgetError : public Error {
 public:
  using Error::Error;
};

// Loss or parameters became non-finite during training.
class NumericAbort : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated, corrupted or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Invalid or unknown configuration keys/values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpsae
