#pragma once

#include <stdexcept>
#include <string>

namespace tpa {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidBoxError : public Error {
 public:
  using Error::Error;
};

/// Raised when an input violates a detector's shape/range contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class DegenerateGridError : public Error {
 public:
  using Error::Error;
};

class SelectionError : public Error {
 public:
  using Error::Error;
};

class TrainingGateError : public Error {
 public:
  using Error::Error;
};

/// Bad user configuration. The CLI maps this to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace tpa
