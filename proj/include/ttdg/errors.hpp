#pragma once

#include <stdexcept>
#include <string>

namespace ttdg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents passed to an array operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed, unknown, or out-of-range configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: unreadable files, invalid labels, non-finite features.
class DataError : public Error {
 public:
  using Error::Error;
};

// A file that is truncated, has a bad magic tag, or fails its checksum.
class CorruptFileError : public DataError {
 public:
  using DataError::DataError;
};

// A well-formed file written by an incompatible format version.
class VersionError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite loss or parameter during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace ttdg
