#pragma once

#include <stdexcept>
#include <string>

namespace cfgen {

/// Operand shapes do not conform.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar parameter is out of its legal range (stride, epsilon, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Observation or feature tensor does not match the declared schema.
class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Persisted file is truncated, corrupt, or of an unsupported version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Statistics or labels carry no information (zero variance, one class).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Too few episodes to produce nonempty train and test splits.
class SplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Optimization diverged (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cfgen
