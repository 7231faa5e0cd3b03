#pragma once

#include <stdexcept>
#include <string>

namespace gavatar {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or container dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or a failed numerical precondition.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, arguments, or model state.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace gavatar
