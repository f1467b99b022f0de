#pragma once

#include <stdexcept>
#include <string>

namespace protnet {

/// Base of every error raised by the library. `exit_code()` maps the error
/// family onto the CLI's process exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid argument values, shape mismatches, empty inputs.
class DomainError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 7; }
};

/// Bad configuration: unknown keys, inconsistent topologies, bad schedules.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Missing/unreadable/corrupt input files, including dataset archives.
class FileError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class SerializationError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

/// Loss became non-finite during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

class TransportError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 6; }
};

}  // namespace protnet
