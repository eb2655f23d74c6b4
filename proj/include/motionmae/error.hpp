#pragma once

#include <stdexcept>
#include <string>

namespace mmae {

// Base of every library error. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad arguments, shape mismatches, invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or otherwise undefined numerical results.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Binary file format errors. Each failure mode is a distinct type.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class DigestError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace mmae
