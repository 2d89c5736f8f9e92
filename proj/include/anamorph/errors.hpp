#pragma once

#include <stdexcept>
#include <string>

namespace anamorph {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DepthError : public Error {
 public:
  using Error::Error;
};

class KindError : public Error {
 public:
  using Error::Error;
};

class MissingDataError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public FormatError {
 public:
  using FormatError::FormatError;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

class CoverageError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class TimeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Raised by remote model backends; `HandshakeError` covers failures before
/// the first successful "hello" exchange.
class BackendError : public Error {
 public:
  using Error::Error;
};

class HandshakeError : public BackendError {
 public:
  using BackendError::BackendError;
};

}  // namespace anamorph
