#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace subzero {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// QR input whose smallest |R_jj| falls below 1e-12 of the largest.
class RankDeficient : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A loss evaluation returned NaN or Inf. `step()` is -1 when the failure
/// happened outside a training loop.
class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& what, long step = -1)
      : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class AllocationRefused : public Error {
 public:
  using Error::Error;
};

class ScaleRefused : public Error {
 public:
  using Error::Error;
};

class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

class DegenerateGradient : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace subzero
