#pragma once

#include <stdexcept>
#include <string>

namespace viral {

// Base class for every error raised by the library. Callers that only need to
// distinguish "our" failures from std ones catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Zero-norm rows, empty masks, non-positive CKNNA denominators, all-zero maps.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace viral
