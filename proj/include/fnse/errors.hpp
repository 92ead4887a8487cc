#pragma once

#include <stdexcept>
#include <string>

namespace fnse {

// Base of every error the library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, length or argument mismatch.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or a math domain violation (log of non-positive, etc).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration. Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// An object used in a state that does not permit the call.
class StateError : public Error {
 public:
  using Error::Error;
};

// Training diverged; carries the offending step.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace fnse
