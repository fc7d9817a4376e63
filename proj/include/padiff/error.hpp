#pragma once

#include <stdexcept>
#include <string>

namespace padiff {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grids that must be aligned are not.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside its documented domain (range, floor, timestep, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible file or text record.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures: missing files, unwritable directories.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace padiff
