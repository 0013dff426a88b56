#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace demix {

// Every failure raised by the library derives from Error. The CLI maps each
// subclass to its own process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Archive could not be decoded: bad magic, corrupt header, truncated payload,
// shape/length mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Two parameter sets (or deltas) disagree on names, shapes or base.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Caller supplied an argument outside the operation's domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DegenerateError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class PipelineError : public Error {
 public:
  using Error::Error;
};

// An evaluator callback failed during a mixture search; carries the ratio it
// was evaluating.
class EvaluationError : public PipelineError {
 public:
  EvaluationError(const std::string& what, std::vector<double> ratio)
      : PipelineError(what), ratio_(std::move(ratio)) {}
  const std::vector<double>& ratio() const noexcept { return ratio_; }

 private:
  std::vector<double> ratio_;
};

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const FormatError*>(&e)) return 4;
  if (dynamic_cast<const NonFiniteError*>(&e)) return 5;
  if (dynamic_cast<const SchemaError*>(&e)) return 6;
  if (dynamic_cast<const InvalidArgument*>(&e)) return 7;
  if (dynamic_cast<const DegenerateError*>(&e)) return 8;
  if (dynamic_cast<const TrainingError*>(&e)) return 9;
  if (dynamic_cast<const ConfigError*>(&e)) return 10;
  if (dynamic_cast<const PipelineError*>(&e)) return 11;
  return 1;
}

}  // namespace demix
