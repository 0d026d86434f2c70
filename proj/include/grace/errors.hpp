#pragma once

#include <stdexcept>
#include <string>

namespace grace {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Sequence exceeds the model's positional capacity.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Empty or otherwise unusable user input.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Zero-norm vectors, empty pooling spans.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values reached the optimizer.
class NumericAbort : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset, corpus or checkpoint contents.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace grace
