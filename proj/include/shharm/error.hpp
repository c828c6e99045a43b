#pragma once

#include <stdexcept>
#include <string>

namespace shharm {

// Base of every error raised by the library. The exit code is what the CLI
// returns when the error escapes a subcommand.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 3; }
  virtual const char* kind() const noexcept { return "data"; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
  const char* kind() const noexcept override { return "usage"; }
};

// Malformed files, inconsistent sidecars, unreadable paths.
class IoError : public Error {
 public:
  using Error::Error;
};

// Inputs that violate a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Singular systems, non-finite losses or gradients.
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
  const char* kind() const noexcept override { return "numerical"; }
};

}  // namespace shharm
