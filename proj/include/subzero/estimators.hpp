#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "subzero/perturbation.hpp"
#include "subzero/problem.hpp"

namespace subzero {

enum class EstimatorFamily { subzero, spsa_full, spsa_dense_subspace, exact_sgd };

std::string_view to_string(EstimatorFamily family);
EstimatorFamily parse_estimator_family(std::string_view text);

struct LossDifference {
  double rho = 0.0;
  double loss_plus = 0.0;
  double loss_minus = 0.0;
};

struct GradEstimate {
  ParamSet layers;
  EstimatorFamily family = EstimatorFamily::subzero;
  std::size_t rank = 0;
  std::uint64_t seed = 0;
  double epsilon = 0.0;
};

struct Estimate {
  LossDifference difference;
  GradEstimate gradient;
};

/// Three in-place passes (+ε, -2ε, +ε) with seed replay and exactly two loss
/// evaluations on `batch`. Parameters are back at their entry values (up to
/// rounding) on return, including when a loss evaluation throws.
LossDifference measure_loss_difference(const Problem& problem, std::span<Matrix> params,
                                       const Subspace& subspace, const Minibatch& batch, double epsilon,
                                       std::uint64_t seed);

/// Regenerates the perturbation for `seed` and returns coefficient * perturbation
/// per layer (the gradient estimate when coefficient = ρ).
ParamSet replay_perturbation(const Subspace& subspace, std::uint64_t seed, double coefficient);

/// Layer-wise low-rank estimator: ρ U_i Z_i V_iᵀ per matrix layer, ρ z_i for
/// vector layers. `params` is mutated during the call and restored.
Estimate subzero_estimate(const Problem& problem, std::span<Matrix> params, const Subspace& subspace,
                          const Minibatch& batch, double epsilon, std::uint64_t seed);

/// Full-space SPSA: ρ z with z a layer-shaped Gaussian.
Estimate spsa_full(const Problem& problem, std::span<Matrix> params, const Minibatch& batch, double epsilon,
                   std::uint64_t seed);

struct DenseSubspaceOptions {
  /// Largest d*q the dense projection may hold.
  std::size_t max_projection_values = 100'000'000;
  /// Test hook: P = I (requires q = d); z is then the first d stream values.
  bool identity_projection = false;
};

/// Dense random-subspace SPSA: P (d x q, N(0,1) entries, drawn row-major
/// before z) and z ~ N(0, I_q); returns ρ P z split per layer.
Estimate spsa_dense_subspace(const Problem& problem, std::span<Matrix> params, const Minibatch& batch,
                             double epsilon, std::size_t q, std::uint64_t seed,
                             const DenseSubspaceOptions& options = {});

/// Values held by the dense projection for dimension d and subspace size q.
std::size_t dense_projection_values(std::size_t d, std::size_t q) noexcept;

/// Full-space plans for a set of shapes (every layer is drawn entrywise).
Subspace full_space_subspace(std::span<const Shape> shapes);

}  // namespace subzero
