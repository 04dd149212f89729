#pragma once

#include <stdexcept>
#include <string>

namespace icepilot {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidTransformError : public Error {
public:
  using Error::Error;
};

class JointLimitError : public Error {
public:
  using Error::Error;
};

/// IK failed on every seed; carries the best weighted residual found.
class UnreachableError : public Error {
public:
  UnreachableError(const std::string& what, double best_residual)
      : Error(what), best_residual_(best_residual) {}
  double best_residual() const noexcept { return best_residual_; }

private:
  double best_residual_;
};

class SceneInfeasibleError : public Error {
public:
  using Error::Error;
};

class DegenerateFrameError : public Error {
public:
  using Error::Error;
};

class NonWatertightError : public Error {
public:
  using Error::Error;
};

class DegenerateExtentError : public Error {
public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
public:
  using Error::Error;
};

class DataUnderrunError : public Error {
public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
public:
  using Error::Error;
};

class EstimatorFailure : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

/// Operation not allowed in the session's current status.
class SessionStateError : public Error {
public:
  using Error::Error;
};

}  // namespace icepilot
