#pragma once

#include <stdexcept>
#include <string>

namespace emoanti {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the operation's domain (bad probability, empty set, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Object used in a state that does not allow the call (replayed tape,
/// uninitialized running statistics, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures: missing files, unwritable outputs.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk content.
class FormatError : public Error {
 public:
  using Error::Error;
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

class NonFiniteDataError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace emoanti
