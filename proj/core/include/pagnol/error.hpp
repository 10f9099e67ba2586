#pragma once

#include <stdexcept>
#include <string>

namespace pagnol {

// Base class for every error raised by the library. Callers that only care
// about "something in pagnol failed" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violated by the caller (bad shapes, out-of-range ids, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// File or format problems: missing files, corrupt checkpoints, bad CSV.
class IoError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during optimization (NaN/Inf loss or gradient).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pagnol
