#pragma once

#include <stdexcept>
#include <string>

namespace mogan {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied an argument that violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Operation is not legal in the object's current lifecycle state
/// (untrained scale, unfrozen stack, busy project, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Stored artifact failed its integrity check.
class DigestError : public Error {
 public:
  using Error::Error;
};

/// Requested entity does not exist.
class NotFoundError : public Error {
 public:
  using Error::Error;
};

/// Training diverged; carries the scale and step where a non-finite loss appeared.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int scale, long step)
      : Error(what), scale_(scale), step_(step) {}
  int scale() const noexcept { return scale_; }
  long step() const noexcept { return step_; }

 private:
  int scale_;
  long step_;
};

}  // namespace mogan
