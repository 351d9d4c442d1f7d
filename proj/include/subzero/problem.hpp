#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "subzero/matrix.hpp"

namespace subzero {

/// One trainable matrix per layer, in layer order.
using ParamSet = std::vector<Matrix>;

struct Minibatch {
  std::vector<std::size_t> indices;
  std::size_t size() const noexcept { return indices.size(); }
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const noexcept { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::vector<Shape> shapes_of(std::span<const Matrix> params);
std::size_t total_size(std::span<const Shape> shapes);

/// Forward-only loss oracle. `loss()` is the only entry point the
/// zeroth-order estimators use; `gradient()` exists for verification and the
/// exact-gradient reference optimizer.
///
/// Losses are batch means. Every `loss()` call is counted.
class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string name() const = 0;
  virtual std::vector<Shape> shapes() const = 0;
  virtual ParamSet initial_params(std::uint64_t seed) const = 0;
  /// Number of rows in the training set; problems without data report 1.
  virtual std::size_t dataset_size() const { return 1; }
  /// Smoothness constant L1 of the full-batch loss, when known exactly.
  virtual std::optional<double> smoothness() const { return std::nullopt; }

  /// Throws NonFiniteLoss when the value is NaN or Inf.
  double loss(std::span<const Matrix> params, const Minibatch& batch) const;
  ParamSet gradient(std::span<const Matrix> params, const Minibatch& batch) const;

  Minibatch full_batch() const;

  std::uint64_t evaluations() const noexcept { return evaluations_.load(std::memory_order_relaxed); }
  void reset_evaluations() const noexcept { evaluations_.store(0, std::memory_order_relaxed); }

 protected:
  virtual double do_loss(std::span<const Matrix> params, const Minibatch& batch) const = 0;
  virtual ParamSet do_gradient(std::span<const Matrix> params, const Minibatch& batch) const = 0;

  void check_shapes(std::span<const Matrix> params) const;

 private:
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

/// Central-difference gradient oracle for tests and verification.
struct FiniteDiffOracle {
  double step = 1e-5;
};

/// (L(w + h e_k) - L(w - h e_k)) / 2h for every parameter entry.
/// Throws NonFiniteLoss if any probe is NaN/Inf.
ParamSet fd_gradient(const Problem& problem, std::span<const Matrix> params, const Minibatch& batch,
                     FiniteDiffOracle oracle = {});

/// max_k |a_k - b_k| / max(max_k |b_k|, floor): a relative error measure that
/// stays meaningful when individual entries of b are near zero.
double relative_error(std::span<const Matrix> a, std::span<const Matrix> b, double floor = 1e-300);

}  // namespace subzero
