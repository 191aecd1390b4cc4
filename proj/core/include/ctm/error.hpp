#pragma once

#include <stdexcept>
#include <string>

namespace ctm {

/// Base class for every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Index or box outside a grid.
class BoundsError : public Error {
 public:
  using Error::Error;
};

/// On-disk data disagrees with its header or is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed data that violates a domain invariant (e.g. label code > 5).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range argument.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Tensor or grid shapes that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Operation called in the wrong state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid pipeline or network configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctm
