#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lcrp {

// Base of every error raised by the library. The CLI maps the subclasses onto
// exit codes: validation/shape problems -> 2, numerical problems -> 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user data: unknown ids, out-of-range targets, malformed files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& where, const std::string& what)
      : ValidationError("parse error at " + where + ": " + what), where_(where) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class CanonizationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// A requested class/target is not predicted by the model.
class TargetError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  NumericalError(const std::string& node, const std::string& what)
      : Error("numerical error at node '" + node + "': " + what), node_(node) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

class TrainingError : public NumericalError {
 public:
  TrainingError(std::size_t step, const std::string& what)
      : NumericalError("<trainer>", "step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace lcrp
