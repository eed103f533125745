#pragma once

#include <stdexcept>
#include <string>

namespace fbsde {

/// Base class for everything thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: malformed config, invalid parameter combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Requested allocation would exceed the ensemble memory cap.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Forward simulation produced a non-finite value.
class SimulationError : public Error {
 public:
  using Error::Error;
};

/// Step size violates a scheme stability or taming admissibility bound.
/// `bound()` is the largest admissible h.
class StepRestrictionError : public Error {
 public:
  StepRestrictionError(const std::string& what, double bound)
      : Error(what), bound_(bound) {}
  double bound() const { return bound_; }

 private:
  double bound_;
};

/// Backward recursion produced a non-finite value at `step()`.
/// Callers treat this as a divergence outcome, not a crash.
class BlowUpError : public Error {
 public:
  BlowUpError(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// Regression input problems: too few rows, non-finite targets.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Rate fitting with fewer than two usable points.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Implicit solver failed to converge and no fallback was allowed.
class SolverError : public Error {
 public:
  using Error::Error;
};

}  // namespace fbsde
