#pragma once

#include <stdexcept>
#include <string>

namespace latmask {

// Exit codes shared by every CLI command.
enum class ExitCode : int {
  ok = 0,
  config_error = 2,
  numerical_error = 3,
  io_error = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept = 0;
};

// Violated precondition on shapes, vocabularies, tape structure, ...
class ContractError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config_error; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::config_error; }
};

class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numerical_error; }
};

class FormatError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::io_error; }
};

class ReportError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::io_error; }
};

}  // namespace latmask
