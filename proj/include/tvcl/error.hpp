#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tvcl {

// Base of every error thrown by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

class InvalidLabelError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class IncompatibleModuleError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class UnsupportedKindError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field_path, const std::string& what)
      : Error(field_path + ": " + what), field_path_(std::move(field_path)) {}

  const std::string& field_path() const noexcept { return field_path_; }

 private:
  std::string field_path_;
};

}  // namespace tvcl
