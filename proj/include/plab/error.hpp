#pragma once

#include <stdexcept>
#include <string>

namespace plab {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched matrix/vector shapes or invalid argument values.
class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data (IDX, checkpoint, buffer files).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-convergence, divergence, singular systems.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace plab
