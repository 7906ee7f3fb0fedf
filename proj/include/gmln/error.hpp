#pragma once

#include <stdexcept>
#include <string>

namespace gmln {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimensions do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operator or module configuration is invalid (kernel/stride/padding, group counts, ...).
class SpecError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an API contract (e.g. backward from a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid data content, e.g. a label outside the class range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A binary file does not follow its declared layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A study manifest or upload is incomplete or inconsistent.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// A record references an entity that does not exist.
class ReferenceError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or persistence failure.
class StorageError : public Error {
 public:
  using Error::Error;
};

}  // namespace gmln
