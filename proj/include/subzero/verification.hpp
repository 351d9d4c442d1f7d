#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "subzero/estimators.hpp"
#include "subzero/perturbation.hpp"
#include "subzero/problems.hpp"

namespace subzero {

// ---------------------------------------------------------------------------
// Explicit projector

/// P = bdiag(V_1 ⊗ U_1, ..., V_l ⊗ U_l), with identity blocks for
/// full-space layers. Coordinates follow `stack_layers`.
struct BlockDiagProjector {
  Matrix p;  // d x q
  std::size_t d = 0;
  std::size_t q = 0;
  /// max |PᵀP - I_q|
  double orthonormality_error = 0.0;
};

constexpr std::size_t kToyScaleLimit = 200;

/// Throws ScaleRefused when d exceeds `max_dim`, and Error when PᵀP is not
/// the identity within 1e-10 (e.g. a norm-alignment scale is active).
BlockDiagProjector materialize_projector(const Subspace& subspace, std::size_t max_dim = kToyScaleLimit);

/// Stacked per-layer vectors: column-stacking vec of the working-shape view
/// for subspace layers, row-major entries for full-space layers.
std::vector<double> stack_layers(std::span<const Matrix> params, const Subspace& subspace);
ParamSet unstack_layers(std::span<const double> stacked, const Subspace& subspace);

/// The stacked z = [vec(Z_1); ...; vec(Z_l)] that `perturb_params_inplace`
/// draws for `seed`.
std::vector<double> draw_stacked_z(const Subspace& subspace, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Monte Carlo plumbing

/// Entrywise running mean and variance (Welford), mergeable (Chan et al.).
class VectorStats {
 public:
  explicit VectorStats(std::size_t dim = 0) : mean_(dim, 0.0), m2_(dim, 0.0) {}

  void add(std::span<const double> sample);
  void merge(const VectorStats& other);

  std::size_t count() const noexcept { return count_; }
  std::size_t dim() const noexcept { return mean_.size(); }
  const std::vector<double>& mean() const noexcept { return mean_; }
  /// Unbiased sample variance per entry (NaN when count < 2).
  std::vector<double> variance() const;
  /// Standard error of the mean per entry.
  std::vector<double> standard_error() const;
  const std::vector<double>& min() const noexcept { return min_; }
  const std::vector<double>& max() const noexcept { return max_; }

 private:
  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
  std::vector<double> min_;
  std::vector<double> max_;
};

struct McOptions {
  std::size_t samples = 100'000;
  std::uint64_t seed = 0;
  /// 0 picks std::thread::hardware_concurrency().
  std::size_t workers = 0;
  /// Standard errors allowed between estimate and target.
  double z = 4.0;
  double abs_tol = 1e-12;
  /// Optional extra gate on |estimate - target| / |target|.
  double rel_tol = std::numeric_limits<double>::infinity();
};

/// Per-sample callback: fills `out` (length dim) for replica seed `seed`,
/// using `work` as a private, freely mutable copy of the parameters.
using SampleFn = std::function<void(ParamSet& work, std::uint64_t seed, std::span<double> out)>;

/// Runs `samples` replicas over a fixed chunk partition; chunks may execute
/// concurrently but are merged in chunk order, so results do not depend on
/// the worker count. Replica i uses derive_seed(seed, {i}).
VectorStats run_monte_carlo(std::span<const Matrix> params, std::size_t dim, const McOptions& options,
                            const SampleFn& sample);

struct MonteCarloReport {
  std::string check;
  std::size_t samples = 0;
  double estimate = 0.0;
  double target = 0.0;
  double deviation = 0.0;
  double relative_deviation = 0.0;
  double standard_error = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// pass iff deviation <= max(abs_tol, z * standard_error) and, when the
/// target is nonzero, relative deviation <= rel_tol. Throws Error when fewer
/// than two samples were drawn.
MonteCarloReport make_report(std::string check, std::size_t samples, double estimate, double target,
                             double deviation, double standard_error, const McOptions& options);

// ---------------------------------------------------------------------------
// Quadratic identities for the layer-wise estimator

/// Mean estimate vs PPᵀ∇f(x); deviation is the Euclidean norm of the
/// difference, standard error the norm of the entrywise standard errors.
MonteCarloReport check_expectation_identity(const QuadraticProblem& problem, const Subspace& subspace,
                                            std::span<const Matrix> x, const McOptions& options,
                                            double epsilon = 1e-3);

/// Mean ‖ĝ‖² vs (q + 2)‖Pᵀ∇f(x)‖². With a full-space subspace this is the
/// plain SPSA target (d + 2)‖∇f(x)‖².
MonteCarloReport check_second_moment(const QuadraticProblem& problem, const Subspace& subspace,
                                     std::span<const Matrix> x, const McOptions& options,
                                     double epsilon = 1e-3);

/// Mean ⟨∇f, ĝ⟩² / (‖Pᵀ∇f‖² ‖ĝ‖²) vs 1/q. `max_ratio_spread` reports
/// max - min of the per-sample ratios (zero up to rounding when q = 1).
MonteCarloReport check_cosine_identity(const QuadraticProblem& problem, const Subspace& subspace,
                                       std::span<const Matrix> x, const McOptions& options,
                                       double epsilon = 1e-3, double* max_ratio_spread = nullptr);

// ---------------------------------------------------------------------------
// Bias of the estimator on smooth non-quadratic losses

struct BiasReport {
  MonteCarloReport report;  // estimate = measured bias, target = theoretical bound
  double epsilon = 0.0;
  double bound = 0.0;
};

/// ‖E ĝ - PPᵀ∇f(x)‖ against (ε²/6) L₂ (q+4)². The mean is taken over the
/// control-variated samples ĝ - ⟨∇f, Pz⟩ Pz, whose expectation equals the
/// bias because E[⟨∇f, Pz⟩ Pz] = PPᵀ∇f exactly. Pass iff
/// bias <= bound + max(abs_tol, z·SE).
BiasReport check_bias_bound(const Problem& problem, const Subspace& subspace, std::span<const Matrix> x,
                            double epsilon, double l2, const McOptions& options);

struct BiasSlopeReport {
  std::vector<BiasReport> points;
  double slope = 0.0;
  bool pass = false;
};

/// Least-squares slope of log(bias) against log(ε); pass iff |slope - 2| <= 0.2
/// and every point is within its bound.
BiasSlopeReport check_bias_slope(const Problem& problem, const Subspace& subspace, std::span<const Matrix> x,
                                 std::span<const double> epsilons, double l2, const McOptions& options);

// ---------------------------------------------------------------------------
// Estimator diagnostics

struct EstimatorSpec {
  EstimatorFamily family = EstimatorFamily::subzero;
  Subspace subspace;    // subzero
  std::size_t q = 0;    // spsa_dense_subspace
  double epsilon = 1e-3;
};

struct Diagnostics {
  double cosine = 0.0;
  /// Var[‖ĝ‖] / ‖g‖²; NaN when fewer than two samples.
  double rel_variance = 0.0;
  std::size_t q_or_d = 0;
  std::size_t samples = 0;
};

/// g is the mean of `samples` estimates; cosine and relative variance are
/// then measured on `samples` fresh estimates. Throws DegenerateGradient
/// when ‖g‖ < 1e-12.
Diagnostics estimator_diagnostics(const Problem& problem, std::span<const Matrix> params, const EstimatorSpec& spec,
                             const McOptions& options);

// ---------------------------------------------------------------------------
// Convergence scaling with a fixed subspace

struct ConvergenceCase {
  std::shared_ptr<const QuadraticProblem> problem;
  Subspace subspace;
  ParamSet x0;
};

/// Quadratic with `layers` square layers of side `side`, rank-r subspace
/// (q = layers * r²) and an x0 whose suboptimality over the reachable affine
/// set x0 + span(P) is exactly `initial_gap`.
ConvergenceCase make_convergence_case(std::size_t layers, std::size_t side, std::size_t rank,
                                      double condition_number, std::uint64_t seed, double initial_gap = 1.0);

/// min f over x0 + span(P).
double reachable_minimum(const QuadraticProblem& problem, const Subspace& subspace, std::span<const Matrix> x0);

struct ConvergenceSettings {
  std::vector<double> targets{0.04, 0.01, 0.0025};
  std::size_t runs = 32;
  std::size_t max_steps = 200'000;
  double perturbation = 1e-3;
  std::uint64_t seed = 0;
};

struct ConvergenceRun {
  std::size_t q = 0;
  double step_size = 0.0;
  double f_star = 0.0;
  /// First N with (1/(N+1)) Σ_{k<=N} (φ_k - f*) <= target, per target.
  std::vector<std::size_t> hitting_times;
  /// φ_k for k = 0..(last hitting time).
  std::vector<double> phi;
};

/// Lockstep `runs` trajectories with η = 1/(4(q+4)L₁); φ_k is their mean
/// loss. Throws BudgetExceeded if a target is not reached by max_steps.
ConvergenceRun run_convergence(const ConvergenceCase& c, const ConvergenceSettings& settings);

struct ConvergenceReport {
  std::vector<ConvergenceRun> runs;
  double slope = 0.0;
  bool pass = false;
};

/// Fits log N against log(q/ε) over every (case, target); pass iff slope in [0.7, 1.3].
ConvergenceReport check_convergence_rate(std::span<const ConvergenceCase> cases, const ConvergenceSettings& settings);

/// Least-squares slope of y on x.
double fit_slope(std::span<const double> x, std::span<const double> y);

}  // namespace subzero
