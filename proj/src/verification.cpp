#include "subzero/verification.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>

#include "subzero/errors.hpp"
#include "subzero/linalg.hpp"
#include "subzero/optimizer.hpp"

namespace subzero {

// ---------------------------------------------------------------------------
// Projector and stacking

namespace {

std::size_t stacked_size(const LayerSubspace& layer) { return layer.plan.shape.m * layer.plan.shape.n; }

double param_dot(std::span<const Matrix> a, std::span<const Matrix> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += dot(a[i].data(), b[i].data());
  return s;
}

double param_norm_sq(std::span<const Matrix> a) { return param_dot(a, a); }

double vector_norm(std::span<const double> v) { return norm2(v); }

}  // namespace

std::vector<double> stack_layers(std::span<const Matrix> params, const Subspace& subspace) {
  if (params.size() != subspace.size()) throw ShapeError("stack_layers: layer count mismatch");
  std::vector<double> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& plan = subspace[i].plan;
    const auto data = params[i].data();
    if (data.size() != stacked_size(subspace[i])) throw ShapeError("stack_layers: layer size mismatch");
    if (plan.full_space) {
      out.insert(out.end(), data.begin(), data.end());
      continue;
    }
    const std::size_t rows = plan.work_rows();
    const std::size_t cols = plan.work_cols();
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t r = 0; r < rows; ++r) out.push_back(data[r * cols + c]);
  }
  return out;
}

ParamSet unstack_layers(std::span<const double> stacked, const Subspace& subspace) {
  ParamSet out;
  std::size_t offset = 0;
  for (const auto& layer : subspace) {
    const auto& plan = layer.plan;
    Matrix m(plan.shape.m, plan.shape.n);
    auto data = m.data();
    if (offset + data.size() > stacked.size()) throw ShapeError("unstack_layers: vector too short");
    if (plan.full_space) {
      std::copy_n(stacked.begin() + offset, data.size(), data.begin());
    } else {
      const std::size_t rows = plan.work_rows();
      const std::size_t cols = plan.work_cols();
      for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t r = 0; r < rows; ++r) data[r * cols + c] = stacked[offset + c * rows + r];
    }
    offset += data.size();
    out.push_back(std::move(m));
  }
  if (offset != stacked.size()) throw ShapeError("unstack_layers: vector too long");
  return out;
}

std::vector<double> draw_stacked_z(const Subspace& subspace, std::uint64_t seed) {
  GaussianStream stream(seed);
  std::vector<double> z;
  for (const auto& layer : subspace) {
    const auto& plan = layer.plan;
    if (plan.full_space) {
      for (std::size_t k = 0; k < plan.draws(); ++k) z.push_back(stream.next());
      continue;
    }
    const std::size_t r = plan.rank;
    std::vector<double> row_major(r * r);
    for (double& v : row_major) v = stream.next();
    for (std::size_t col = 0; col < r; ++col)
      for (std::size_t row = 0; row < r; ++row) z.push_back(row_major[row * r + col]);
  }
  return z;
}

BlockDiagProjector materialize_projector(const Subspace& subspace, std::size_t max_dim) {
  std::size_t d = 0;
  std::size_t q = 0;
  for (const auto& layer : subspace) {
    d += stacked_size(layer);
    q += layer.plan.dof();
  }
  if (d > max_dim) {
    throw ScaleRefused("materialize_projector: d = " + std::to_string(d) + " exceeds the toy-scale cap of " +
                       std::to_string(max_dim));
  }
  BlockDiagProjector out;
  out.d = d;
  out.q = q;
  out.p = Matrix(d, q);
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  for (const auto& layer : subspace) {
    const auto& plan = layer.plan;
    const std::size_t rows = stacked_size(layer);
    if (plan.full_space) {
      for (std::size_t k = 0; k < rows; ++k) out.p(row0 + k, col0 + k) = plan.scale;
    } else {
      const Matrix block = kron(layer.pair->v, layer.pair->u);
      for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j) out.p(row0 + i, col0 + j) = plan.scale * block(i, j);
    }
    row0 += rows;
    col0 += plan.dof();
  }
  out.orthonormality_error = max_abs_diff(matmul_tn(out.p, out.p), Matrix::identity(q));
  if (out.orthonormality_error > 1e-10) {
    throw Error("materialize_projector: PᵀP deviates from the identity by " +
                std::to_string(out.orthonormality_error));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo plumbing

void VectorStats::add(std::span<const double> sample) {
  if (sample.size() != mean_.size()) throw ShapeError("VectorStats::add: dimension mismatch");
  ++count_;
  const double n = static_cast<double>(count_);
  for (std::size_t k = 0; k < sample.size(); ++k) {
    const double delta = sample[k] - mean_[k];
    mean_[k] += delta / n;
    m2_[k] += delta * (sample[k] - mean_[k]);
  }
  if (min_.empty()) {
    min_.assign(sample.begin(), sample.end());
    max_.assign(sample.begin(), sample.end());
  } else {
    for (std::size_t k = 0; k < sample.size(); ++k) {
      min_[k] = std::min(min_[k], sample[k]);
      max_[k] = std::max(max_[k], sample[k]);
    }
  }
}

void VectorStats::merge(const VectorStats& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  if (other.dim() != dim()) throw ShapeError("VectorStats::merge: dimension mismatch");
  const double na = static_cast<double>(count_);
  const double nb = static_cast<double>(other.count_);
  const double n = na + nb;
  for (std::size_t k = 0; k < mean_.size(); ++k) {
    const double delta = other.mean_[k] - mean_[k];
    mean_[k] += delta * nb / n;
    m2_[k] += other.m2_[k] + delta * delta * na * nb / n;
    min_[k] = std::min(min_[k], other.min_[k]);
    max_[k] = std::max(max_[k], other.max_[k]);
  }
  count_ += other.count_;
}

std::vector<double> VectorStats::variance() const {
  std::vector<double> v(mean_.size(), std::numeric_limits<double>::quiet_NaN());
  if (count_ < 2) return v;
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = m2_[k] / static_cast<double>(count_ - 1);
  return v;
}

std::vector<double> VectorStats::standard_error() const {
  auto v = variance();
  for (double& x : v) x = std::sqrt(x / static_cast<double>(count_));
  return v;
}

VectorStats run_monte_carlo(std::span<const Matrix> params, std::size_t dim, const McOptions& options,
                            const SampleFn& sample) {
  const std::size_t n = options.samples;
  const std::size_t chunks = std::max<std::size_t>(1, std::min<std::size_t>(n, 64));
  std::vector<VectorStats> partial(chunks, VectorStats(dim));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    ParamSet work(params.begin(), params.end());
    std::vector<double> out(dim);
    for (std::size_t c = next.fetch_add(1); c < chunks; c = next.fetch_add(1)) {
      try {
        const std::size_t begin = c * n / chunks;
        const std::size_t end = (c + 1) * n / chunks;
        for (std::size_t i = begin; i < end; ++i) {
          std::fill(out.begin(), out.end(), 0.0);
          sample(work, derive_seed(options.seed, {i}), out);
          partial[c].add(out);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(chunks);
      }
    }
  };

  std::size_t workers = options.workers ? options.workers : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, chunks);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  VectorStats total(dim);
  for (const auto& p : partial) total.merge(p);
  return total;
}

MonteCarloReport make_report(std::string check, std::size_t samples, double estimate, double target,
                             double deviation, double standard_error, const McOptions& options) {
  if (samples < 2) throw Error(check + ": at least two Monte Carlo samples are required");
  MonteCarloReport r;
  r.check = std::move(check);
  r.samples = samples;
  r.estimate = estimate;
  r.target = target;
  r.deviation = deviation;
  r.standard_error = standard_error;
  r.relative_deviation = target != 0.0 ? deviation / std::abs(target) : std::numeric_limits<double>::infinity();
  r.threshold = std::max(options.abs_tol, options.z * standard_error);
  r.pass = std::isfinite(deviation) && deviation <= r.threshold;
  if (target != 0.0 && std::isfinite(options.rel_tol)) r.pass = r.pass && r.relative_deviation <= options.rel_tol;
  return r;
}

// ---------------------------------------------------------------------------
// Quadratic identities

namespace {

struct QuadraticSetup {
  BlockDiagProjector projector;
  std::vector<double> grad;       // stacked ∇f(x)
  std::vector<double> projected;  // Pᵀ∇f(x)
  ParamSet grad_params;
};

QuadraticSetup quadratic_setup(const QuadraticProblem& problem, const Subspace& subspace,
                               std::span<const Matrix> x) {
  QuadraticSetup s;
  s.projector = materialize_projector(subspace);
  s.grad_params = problem.gradient(x, problem.full_batch());
  s.grad = stack_layers(s.grad_params, subspace);
  s.projected.assign(s.projector.q, 0.0);
  for (std::size_t i = 0; i < s.projector.d; ++i)
    for (std::size_t j = 0; j < s.projector.q; ++j) s.projected[j] += s.projector.p(i, j) * s.grad[i];
  return s;
}

}  // namespace

MonteCarloReport check_expectation_identity(const QuadraticProblem& problem, const Subspace& subspace,
                                            std::span<const Matrix> x, const McOptions& options, double epsilon) {
  const QuadraticSetup s = quadratic_setup(problem, subspace, x);
  std::vector<double> target(s.projector.d, 0.0);
  for (std::size_t i = 0; i < s.projector.d; ++i) target[i] = dot(s.projector.p.row(i), s.projected);

  const Minibatch batch = problem.full_batch();
  const auto stats = run_monte_carlo(x, s.projector.d, options, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    const auto est = subzero_estimate(problem, work, subspace, batch, epsilon, seed);
    const auto stacked = stack_layers(est.gradient.layers, subspace);
    std::copy(stacked.begin(), stacked.end(), out.begin());
  });

  std::vector<double> diff(target.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = stats.mean()[i] - target[i];
  return make_report("expectation_identity", stats.count(), vector_norm(stats.mean()), vector_norm(target),
                     vector_norm(diff), vector_norm(stats.standard_error()), options);
}

MonteCarloReport check_second_moment(const QuadraticProblem& problem, const Subspace& subspace,
                                     std::span<const Matrix> x, const McOptions& options, double epsilon) {
  const QuadraticSetup s = quadratic_setup(problem, subspace, x);
  const double pg = vector_norm(s.projected);
  const double target = (static_cast<double>(s.projector.q) + 2.0) * pg * pg;
  const Minibatch batch = problem.full_batch();
  const auto stats = run_monte_carlo(x, 1, options, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    const auto est = subzero_estimate(problem, work, subspace, batch, epsilon, seed);
    out[0] = param_norm_sq(est.gradient.layers);
  });
  const double mean = stats.mean()[0];
  return make_report("second_moment", stats.count(), mean, target, std::abs(mean - target),
                     stats.standard_error()[0], options);
}

MonteCarloReport check_cosine_identity(const QuadraticProblem& problem, const Subspace& subspace,
                                       std::span<const Matrix> x, const McOptions& options, double epsilon,
                                       double* max_ratio_spread) {
  const QuadraticSetup s = quadratic_setup(problem, subspace, x);
  const double pg_sq = dot(s.projected, s.projected);
  if (!(pg_sq > 0.0)) throw DegenerateGradient("check_cosine_identity: Pᵀ∇f(x) is zero");
  const double target = 1.0 / static_cast<double>(s.projector.q);
  const Minibatch batch = problem.full_batch();
  const auto stats = run_monte_carlo(x, 1, options, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    const auto est = subzero_estimate(problem, work, subspace, batch, epsilon, seed);
    const double g_sq = param_norm_sq(est.gradient.layers);
    if (!(g_sq > 0.0)) throw DegenerateGradient("check_cosine_identity: zero estimate encountered");
    const double inner = param_dot(s.grad_params, est.gradient.layers);
    out[0] = inner * inner / (pg_sq * g_sq);
  });
  if (max_ratio_spread) *max_ratio_spread = stats.max()[0] - stats.min()[0];
  const double mean = stats.mean()[0];
  return make_report("cosine_identity", stats.count(), mean, target, std::abs(mean - target), stats.standard_error()[0],
                     options);
}

// ---------------------------------------------------------------------------
// Bias

BiasReport check_bias_bound(const Problem& problem, const Subspace& subspace, std::span<const Matrix> x,
                            double epsilon, double l2, const McOptions& options) {
  if (!(epsilon > 0.0) || !(l2 >= 0.0)) throw Error("check_bias_bound: epsilon > 0 and L2 >= 0 required");
  std::size_t d = 0;
  for (const auto& layer : subspace) d += stacked_size(layer);
  if (d > kToyScaleLimit) throw ScaleRefused("check_bias_bound: toy scale only");
  const std::size_t q = subspace_dimension(subspace);
  const Minibatch batch = problem.full_batch();
  const ParamSet grad = problem.gradient(x, batch);

  const auto stats = run_monte_carlo(x, d, options, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    const auto diff = measure_loss_difference(problem, work, subspace, batch, epsilon, seed);
    const ParamSet direction = replay_perturbation(subspace, seed, 1.0);  // Pz
    const double coefficient = diff.rho - param_dot(grad, direction);
    std::size_t k = 0;
    for (const auto& layer : direction)
      for (double v : layer.data()) out[k++] = coefficient * v;
  });

  BiasReport out;
  out.epsilon = epsilon;
  const double qp4 = static_cast<double>(q) + 4.0;
  out.bound = epsilon * epsilon / 6.0 * l2 * qp4 * qp4;
  const double bias = vector_norm(stats.mean());
  const double se = vector_norm(stats.standard_error());
  out.report = make_report("bias_bound", stats.count(), bias, out.bound, std::max(0.0, bias - out.bound), se,
                           options);
  // One-sided: the measured bias may sit anywhere below the bound.
  out.report.relative_deviation = out.bound > 0.0 ? bias / out.bound : std::numeric_limits<double>::infinity();
  out.report.pass = bias <= out.bound + std::max(options.abs_tol, options.z * se);
  return out;
}

BiasSlopeReport check_bias_slope(const Problem& problem, const Subspace& subspace, std::span<const Matrix> x,
                                 std::span<const double> epsilons, double l2, const McOptions& options) {
  if (epsilons.size() < 2) throw Error("check_bias_slope: need at least two epsilon values");
  BiasSlopeReport out;
  std::vector<double> lx;
  std::vector<double> ly;
  bool all_bounded = true;
  for (double eps : epsilons) {
    out.points.push_back(check_bias_bound(problem, subspace, x, eps, l2, options));
    all_bounded = all_bounded && out.points.back().report.pass;
    lx.push_back(std::log(eps));
    ly.push_back(std::log(out.points.back().report.estimate));
  }
  out.slope = fit_slope(lx, ly);
  out.pass = all_bounded && std::abs(out.slope - 2.0) <= 0.2;
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

Diagnostics estimator_diagnostics(const Problem& problem, std::span<const Matrix> params, const EstimatorSpec& spec,
                             const McOptions& options) {
  const auto shapes = shapes_of(params);
  const std::size_t d = total_size(shapes);
  const Minibatch batch = problem.full_batch();

  auto estimate = [&](ParamSet& work, std::uint64_t seed) -> ParamSet {
    switch (spec.family) {
      case EstimatorFamily::subzero:
        return subzero_estimate(problem, work, spec.subspace, batch, spec.epsilon, seed).gradient.layers;
      case EstimatorFamily::spsa_full:
        return spsa_full(problem, work, batch, spec.epsilon, seed).gradient.layers;
      case EstimatorFamily::spsa_dense_subspace:
        return spsa_dense_subspace(problem, work, batch, spec.epsilon, spec.q, seed).gradient.layers;
      case EstimatorFamily::exact_sgd:
        break;
    }
    throw Error("estimator_diagnostics: exact_sgd has no stochastic estimate");
  };

  const auto first = run_monte_carlo(params, d, options, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    std::size_t k = 0;
    for (const auto& layer : estimate(work, seed))
      for (double v : layer.data()) out[k++] = v;
  });
  const std::vector<double> g = first.mean();
  const double g_norm = vector_norm(g);
  if (g_norm < 1e-12) throw DegenerateGradient("estimator_diagnostics: mean estimate is (numerically) zero");

  McOptions fresh = options;
  fresh.seed = derive_seed(options.seed, {0xF16ull});
  const auto second = run_monte_carlo(params, 2, fresh, [&](ParamSet& work, std::uint64_t seed, std::span<double> out) {
    double inner = 0.0;
    double norm_sq = 0.0;
    std::size_t k = 0;
    for (const auto& layer : estimate(work, seed)) {
      for (double v : layer.data()) {
        inner += v * g[k++];
        norm_sq += v * v;
      }
    }
    const double norm = std::sqrt(norm_sq);
    out[0] = norm > 0.0 ? inner / (norm * g_norm) : 0.0;
    out[1] = norm;
  });

  Diagnostics diag;
  diag.samples = second.count();
  diag.cosine = second.mean()[0];
  diag.rel_variance = second.variance()[1] / (g_norm * g_norm);
  switch (spec.family) {
    case EstimatorFamily::subzero: diag.q_or_d = subspace_dimension(spec.subspace); break;
    case EstimatorFamily::spsa_dense_subspace: diag.q_or_d = spec.q; break;
    default: diag.q_or_d = d; break;
  }
  return diag;
}

// ---------------------------------------------------------------------------
// Convergence

namespace {

// Columns of P expressed as parameter-space (row-major flat) directions.
Matrix flat_directions(const Subspace& subspace) {
  const BlockDiagProjector proj = materialize_projector(subspace);
  Matrix dirs(proj.d, proj.q);
  std::vector<double> column(proj.d);
  for (std::size_t j = 0; j < proj.q; ++j) {
    for (std::size_t i = 0; i < proj.d; ++i) column[i] = proj.p(i, j);
    const auto flat = flatten(unstack_layers(column, subspace));
    for (std::size_t i = 0; i < proj.d; ++i) dirs(i, j) = flat[i];
  }
  return dirs;
}

// Minimizer of f over x0 + span(P), as a flat vector.
std::vector<double> reachable_minimizer(const QuadraticProblem& problem, const Subspace& subspace,
                                        std::span<const Matrix> x0) {
  const Matrix dirs = flat_directions(subspace);
  const std::size_t d = dirs.rows();
  const std::size_t q = dirs.cols();
  const std::vector<double> x = flatten(x0);
  Matrix hd(d, q);
  std::vector<double> col(d);
  std::vector<double> hcol(d);
  for (std::size_t j = 0; j < q; ++j) {
    for (std::size_t i = 0; i < d; ++i) col[i] = dirs(i, j);
    problem.apply_hessian(col, hcol);
    for (std::size_t i = 0; i < d; ++i) hd(i, j) = hcol[i];
  }
  const Matrix reduced = matmul_tn(dirs, hd);  // Pᵀ H P
  std::vector<double> hx(d);
  problem.apply_hessian(x, hx);
  std::vector<double> rhs(q, 0.0);
  const auto& b = problem.linear();
  for (std::size_t j = 0; j < q; ++j) {
    for (std::size_t i = 0; i < d; ++i) rhs[j] -= dirs(i, j) * (hx[i] + (b.empty() ? 0.0 : 0.5 * b[i]));
  }
  const auto y = solve_spd(reduced, rhs);
  std::vector<double> out = x;
  for (std::size_t i = 0; i < d; ++i) out[i] += dot(dirs.row(i), y);
  return out;
}

}  // namespace

double reachable_minimum(const QuadraticProblem& problem, const Subspace& subspace, std::span<const Matrix> x0) {
  const auto xbar = reachable_minimizer(problem, subspace, x0);
  return problem.loss(unflatten(xbar, problem.shapes()), problem.full_batch());
}

ConvergenceCase make_convergence_case(std::size_t layers, std::size_t side, std::size_t rank,
                                      double condition_number, std::uint64_t seed, double initial_gap) {
  QuadraticProblem::Options opts;
  opts.shapes.assign(layers, Shape{side, side});
  opts.condition_number = condition_number;
  opts.seed = seed;
  auto problem = std::make_shared<const QuadraticProblem>(opts);

  PlanOptions plan;
  plan.rank = rank;
  ConvergenceCase c;
  c.problem = problem;
  c.subspace = generate_subspace(plan_layers(opts.shapes, plan), derive_seed(seed, {0xC0ull}));

  const ParamSet raw = problem->initial_params(derive_seed(seed, {0xC1ull}));
  const auto xbar = reachable_minimizer(*problem, c.subspace, raw);
  const auto batch = problem->full_batch();
  const double f_star = problem->loss(unflatten(xbar, opts.shapes), batch);
  const double gap = problem->loss(raw, batch) - f_star;
  if (!(gap > 0.0)) throw Error("make_convergence_case: starting point already optimal in its subspace");
  const double alpha = std::sqrt(initial_gap / gap);
  const auto flat = flatten(raw);
  std::vector<double> x0(flat.size());
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = xbar[i] + alpha * (flat[i] - xbar[i]);
  c.x0 = unflatten(x0, opts.shapes);
  return c;
}

ConvergenceRun run_convergence(const ConvergenceCase& c, const ConvergenceSettings& settings) {
  if (settings.runs < 1 || settings.targets.empty()) throw Error("run_convergence: need runs >= 1 and a target");
  const QuadraticProblem& problem = *c.problem;
  const auto l1 = problem.smoothness();
  ConvergenceRun out;
  out.q = subspace_dimension(c.subspace);
  out.step_size = theoretical_step_size(out.q, *l1);
  out.f_star = reachable_minimum(problem, c.subspace, c.x0);
  out.hitting_times.assign(settings.targets.size(), 0);

  OptimizerConfig config;
  config.estimator_family = EstimatorFamily::subzero;
  config.epsilon = settings.perturbation;
  config.learning_rate = {LearningRateSchedule::Kind::constant, out.step_size};
  config.norm_alignment_mode = NormAlignment::off;
  config.step_budget = settings.max_steps;
  config.subspace_change_frequency = settings.max_steps;
  config.eval_interval = 0;

  std::vector<TrainerState> states(settings.runs);
  std::vector<OptimizerConfig> configs(settings.runs, config);
  for (std::size_t r = 0; r < settings.runs; ++r) {
    states[r].params = c.x0;
    states[r].subspace = c.subspace;
    states[r].subspace_fixed = true;
    configs[r].master_seed = derive_seed(settings.seed, {r});
  }

  const Minibatch batch = problem.full_batch();
  std::vector<bool> resolved(settings.targets.size(), false);
  std::size_t remaining = settings.targets.size();
  double running = 0.0;
  for (std::size_t k = 0; k <= settings.max_steps; ++k) {
    if (k > 0) {
      for (std::size_t r = 0; r < settings.runs; ++r) step(states[r], configs[r], problem, batch);
    }
    double phi = 0.0;
    for (std::size_t r = 0; r < settings.runs; ++r) phi += problem.loss(states[r].params, batch);
    phi /= static_cast<double>(settings.runs);
    out.phi.push_back(phi);
    running += phi - out.f_star;
    const double average = running / static_cast<double>(k + 1);
    for (std::size_t t = 0; t < settings.targets.size(); ++t) {
      if (!resolved[t] && average <= settings.targets[t]) {
        resolved[t] = true;
        out.hitting_times[t] = k;
        --remaining;
      }
    }
    if (remaining == 0) return out;
  }
  throw BudgetExceeded("run_convergence: step cap of " + std::to_string(settings.max_steps) +
                       " reached before every target");
}

ConvergenceReport check_convergence_rate(std::span<const ConvergenceCase> cases, const ConvergenceSettings& settings) {
  ConvergenceReport report;
  std::vector<double> lx;
  std::vector<double> ly;
  for (const auto& c : cases) {
    report.runs.push_back(run_convergence(c, settings));
    const auto& run = report.runs.back();
    for (std::size_t t = 0; t < settings.targets.size(); ++t) {
      if (run.hitting_times[t] == 0) throw Error("check_convergence_rate: target met at the starting point");
      lx.push_back(std::log(static_cast<double>(run.q) / settings.targets[t]));
      ly.push_back(std::log(static_cast<double>(run.hitting_times[t])));
    }
  }
  report.slope = fit_slope(lx, ly);
  report.pass = report.slope >= 0.7 && report.slope <= 1.3;
  return report;
}

double fit_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("fit_slope: need two or more paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw Error("fit_slope: x values are all equal");
  return sxy / sxx;
}

}  // namespace subzero
