#pragma once

#include <stdexcept>
#include <string>

namespace dask {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument or data value is outside its admissible range.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (non-scalar loss, double backward, missing grad).
class TapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset directory, manifest or image file.
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { io, magic, metadata, truncated, shape, kind_mismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dask
