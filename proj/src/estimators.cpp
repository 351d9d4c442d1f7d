#include "subzero/estimators.hpp"

#include <stdexcept>

#include "subzero/errors.hpp"

namespace subzero {

std::string_view to_string(EstimatorFamily family) {
  switch (family) {
    case EstimatorFamily::subzero: return "subzero";
    case EstimatorFamily::spsa_full: return "spsa_full";
    case EstimatorFamily::spsa_dense_subspace: return "spsa_dense_subspace";
    case EstimatorFamily::exact_sgd: return "exact_sgd";
  }
  return "unknown";
}

EstimatorFamily parse_estimator_family(std::string_view text) {
  if (text == "subzero") return EstimatorFamily::subzero;
  if (text == "spsa_full") return EstimatorFamily::spsa_full;
  if (text == "spsa_dense_subspace") return EstimatorFamily::spsa_dense_subspace;
  if (text == "exact_sgd") return EstimatorFamily::exact_sgd;
  throw ConfigError("unknown estimator family '" + std::string(text) + "'");
}

LossDifference measure_loss_difference(const Problem& problem, std::span<Matrix> params,
                                       const Subspace& subspace, const Minibatch& batch, double epsilon,
                                       std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ShapeError("epsilon must be positive");
  // Net multiple of ε currently applied, so a throwing loss can be undone.
  double applied = 0.0;
  auto shift = [&](double direction) {
    perturb_params_inplace(params, subspace, {epsilon, seed, direction});
    applied += direction;
  };
  LossDifference out;
  try {
    shift(1.0);
    out.loss_plus = problem.loss(params, batch);
    shift(-2.0);
    out.loss_minus = problem.loss(params, batch);
    shift(1.0);
  } catch (...) {
    if (applied != 0.0) perturb_params_inplace(params, subspace, {epsilon, seed, -applied});
    throw;
  }
  out.rho = (out.loss_plus - out.loss_minus) / (2.0 * epsilon);
  return out;
}

ParamSet replay_perturbation(const Subspace& subspace, std::uint64_t seed, double coefficient) {
  GaussianStream stream(seed);
  ParamSet out;
  out.reserve(subspace.size());
  for (const auto& layer : subspace) {
    Matrix m(layer.plan.shape.m, layer.plan.shape.n);
    add_layer_perturbation(m, layer, coefficient, stream);
    out.push_back(std::move(m));
  }
  return out;
}

Estimate subzero_estimate(const Problem& problem, std::span<Matrix> params, const Subspace& subspace,
                          const Minibatch& batch, double epsilon, std::uint64_t seed) {
  Estimate e;
  e.difference = measure_loss_difference(problem, params, subspace, batch, epsilon, seed);
  e.gradient.layers = replay_perturbation(subspace, seed, e.difference.rho);
  e.gradient.family = EstimatorFamily::subzero;
  std::size_t rank = 0;
  for (const auto& layer : subspace) rank = std::max(rank, layer.plan.rank);
  e.gradient.rank = rank;
  e.gradient.seed = seed;
  e.gradient.epsilon = epsilon;
  return e;
}

Subspace full_space_subspace(std::span<const Shape> shapes) {
  PlanOptions options;
  options.force_full_space = true;
  Subspace out;
  for (const auto& plan : plan_layers(shapes, options)) out.push_back({plan, std::nullopt});
  return out;
}

Estimate spsa_full(const Problem& problem, std::span<Matrix> params, const Minibatch& batch, double epsilon,
                   std::uint64_t seed) {
  const auto shapes = shapes_of(params);
  const Subspace full = full_space_subspace(shapes);
  Estimate e;
  e.difference = measure_loss_difference(problem, params, full, batch, epsilon, seed);
  e.gradient.layers = replay_perturbation(full, seed, e.difference.rho);
  e.gradient.family = EstimatorFamily::spsa_full;
  e.gradient.seed = seed;
  e.gradient.epsilon = epsilon;
  return e;
}

std::size_t dense_projection_values(std::size_t d, std::size_t q) noexcept { return d * q; }

namespace {

void add_flat(std::span<Matrix> params, std::span<const double> delta, double coefficient) {
  std::size_t offset = 0;
  for (auto& layer : params) {
    for (double& v : layer.data()) v += coefficient * delta[offset++];
  }
}

}  // namespace

Estimate spsa_dense_subspace(const Problem& problem, std::span<Matrix> params, const Minibatch& batch,
                             double epsilon, std::size_t q, std::uint64_t seed,
                             const DenseSubspaceOptions& options) {
  if (!(epsilon > 0.0)) throw ShapeError("epsilon must be positive");
  const auto shapes = shapes_of(params);
  const std::size_t d = total_size(shapes);
  if (q < 1 || q > d) throw ShapeError("spsa_dense_subspace: q must lie in [1, d]");

  GaussianStream stream(seed);
  std::vector<double> direction(d, 0.0);  // P z
  if (options.identity_projection) {
    if (q != d) throw ShapeError("spsa_dense_subspace: identity projection requires q = d");
    for (double& v : direction) v = stream.next();
  } else {
    if (q != 0 && dense_projection_values(d, q) / q != d) throw AllocationRefused("d*q overflows");
    if (dense_projection_values(d, q) > options.max_projection_values) {
      throw AllocationRefused("spsa_dense_subspace: d*q = " + std::to_string(d * q) +
                              " exceeds the projection cap of " + std::to_string(options.max_projection_values));
    }
    const Matrix projection = gaussian_matrix(stream, d, q);
    std::vector<double> z(q);
    for (double& v : z) v = stream.next();
    for (std::size_t i = 0; i < d; ++i) direction[i] = dot(projection.row(i), z);
  }

  Estimate e;
  double applied = 0.0;
  try {
    add_flat(params, direction, epsilon);
    applied = 1.0;
    e.difference.loss_plus = problem.loss(params, batch);
    add_flat(params, direction, -2.0 * epsilon);
    applied = -1.0;
    e.difference.loss_minus = problem.loss(params, batch);
    add_flat(params, direction, epsilon);
    applied = 0.0;
  } catch (...) {
    if (applied != 0.0) add_flat(params, direction, -applied * epsilon);
    throw;
  }
  e.difference.rho = (e.difference.loss_plus - e.difference.loss_minus) / (2.0 * epsilon);

  std::size_t offset = 0;
  for (const auto& s : shapes) {
    Matrix layer(s.rows, s.cols);
    for (double& v : layer.data()) v = e.difference.rho * direction[offset++];
    e.gradient.layers.push_back(std::move(layer));
  }
  e.gradient.family = EstimatorFamily::spsa_dense_subspace;
  e.gradient.rank = q;
  e.gradient.seed = seed;
  e.gradient.epsilon = epsilon;
  return e;
}

}  // namespace subzero
