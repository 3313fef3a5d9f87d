#pragma once

#include <stdexcept>
#include <string>

namespace mp {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (head geometry, schedule, synth spec, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad argument value (label out of range, missing CLS token, asymmetric matrix).
class InputError : public Error {
 public:
  using Error::Error;
};

/// API misuse (non-scalar backward, step out of range, missing gradient).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Persisted data is unusable: wrong magic, non-finite values, bad labels.
class DataError : public Error {
 public:
  using Error::Error;
};

/// File length disagrees with what its header implies.
class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

/// A class has too few samples to be stratified.
class SplitError : public DataError {
 public:
  using DataError::DataError;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mp
