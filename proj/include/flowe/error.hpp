#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor, grid or frame extents that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Singular affine map or another degenerate geometric input.
class DegeneracyError : public Error {
 public:
  using Error::Error;
};

/// Malformed byte stream; `offset()` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid training or evaluation data (e.g. a class id out of range).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace flowe
