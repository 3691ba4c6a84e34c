#pragma once

#include <stdexcept>
#include <string>

namespace bnnkh {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated input (IDX streams, model files, key text).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A structurally valid file whose contents violate a domain invariant.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// Caller-side precondition failure (dimension or key-length mismatch, bad counts).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Downloaded or cached data that does not match the expected dataset.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace bnnkh
