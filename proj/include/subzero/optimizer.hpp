#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "subzero/estimators.hpp"
#include "subzero/perturbation.hpp"
#include "subzero/problem.hpp"

namespace subzero {

struct LearningRateSchedule {
  enum class Kind { constant, linear_decay };
  Kind kind = Kind::constant;
  double initial = 1e-3;

  /// η_t; linear decay is η₀ (1 - t/T), which stays positive for t < T.
  double at(std::uint64_t step, std::uint64_t budget) const noexcept;
  friend bool operator==(const LearningRateSchedule&, const LearningRateSchedule&) = default;
};

struct OptimizerConfig {
  std::size_t rank = 4;
  double epsilon = 1e-3;
  std::size_t subspace_change_frequency = 100;
  std::size_t step_budget = 1000;
  LearningRateSchedule learning_rate;
  EstimatorFamily estimator_family = EstimatorFamily::subzero;
  std::size_t batch_size = 1;
  std::uint64_t master_seed = 0;
  NormAlignment norm_alignment_mode = NormAlignment::scale_z;
  bool reshape = false;
  /// Subspace size for spsa_dense_subspace.
  std::size_t dense_q = 8;
  std::size_t dense_max_values = 100'000'000;
  /// Full-batch validation every this many steps; 0 disables.
  std::size_t eval_interval = 500;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Throws ConfigError on any violated precondition.
void validate(const OptimizerConfig& config);

/// Default schedule kind per family: linear decay for exact_sgd, constant for
/// the zeroth-order families.
LearningRateSchedule::Kind default_schedule(EstimatorFamily family) noexcept;

struct TrainerState {
  std::uint64_t step = 0;
  ParamSet params;
  Subspace subspace;
  /// When set, the subspace is never regenerated (fixed-P runs).
  bool subspace_fixed = false;
  std::size_t regenerations = 0;
};

struct StepRecord {
  std::uint64_t step = 0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double rho = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct ValidationRecord {
  std::uint64_t step = 0;
  double loss = 0.0;
};

struct RunRecord {
  std::vector<StepRecord> steps;
  std::vector<ValidationRecord> validation;
  ParamSet final_params;
};

/// Seeds used by step t: perturbation seed s^t and the subspace seed.
std::uint64_t step_seed(std::uint64_t master_seed, std::uint64_t step) noexcept;
std::uint64_t subspace_seed(std::uint64_t master_seed, std::uint64_t step) noexcept;

/// Layer plans implied by `config` for the problem's shapes.
std::vector<LayerPlan> plan_for(const OptimizerConfig& config, std::span<const Shape> shapes);

TrainerState initial_state(const Problem& problem, const OptimizerConfig& config);
TrainerState initial_state(ParamSet params, const OptimizerConfig& config);

/// One iteration: lazy subspace refresh when t mod T₀ = 0, two loss
/// evaluations on `batch`, then a per-layer in-place update replayed from the
/// step seed. Advances `state.step`. NonFiniteLoss carries the step index.
StepRecord step(TrainerState& state, const OptimizerConfig& config, const Problem& problem,
                const Minibatch& batch);

/// Runs `config.step_budget` steps with minibatches drawn from (master_seed, t).
RunRecord train(const Problem& problem, const OptimizerConfig& config);
RunRecord train(const Problem& problem, const OptimizerConfig& config, TrainerState state);

/// 1 / (4 (q + 4) L₁).
double theoretical_step_size(std::size_t q, double l1);

struct SmoothnessEstimate {
  double value = 0.0;
  bool exact = false;
};

/// Exact L₁ when the problem reports one; otherwise the largest observed
/// ‖∇f(x) - ∇f(y)‖ / ‖x - y‖ over `pairs` random pairs near `center`, with
/// finite-difference gradients.
SmoothnessEstimate smoothness_constant(const Problem& problem, std::span<const Matrix> center,
                                       std::size_t pairs = 16, double radius = 0.1, std::uint64_t seed = 0);

}  // namespace subzero
