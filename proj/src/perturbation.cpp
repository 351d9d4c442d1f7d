#include "subzero/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "subzero/errors.hpp"
#include "subzero/linalg.hpp"

namespace subzero {

std::vector<LayerPlan> plan_layers(std::span<const Shape> shapes, const PlanOptions& options) {
  if (options.rank == 0) throw ConfigError("rank must be at least 1");
  std::vector<LayerPlan> plans;
  plans.reserve(shapes.size());
  for (const auto& s : shapes) {
    if (s.rows == 0 || s.cols == 0) throw ShapeError("parameter layer with a zero dimension");
    LayerPlan plan;
    plan.full_space = options.force_full_space || std::min(s.rows, s.cols) == 1;
    if (plan.full_space) {
      plan.shape = {s.rows, s.cols, s.rows, s.cols};
      plan.rank = 0;
    } else {
      plan.shape = options.reshape ? reshape_near_square(s.rows, s.cols)
                                   : LayerShape{s.rows, s.cols, s.rows, s.cols};
      plan.rank = std::min({options.rank, plan.shape.reshaped_m, plan.shape.reshaped_n});
    }
    plans.push_back(plan);
  }

  if (options.alignment == NormAlignment::scale_z) {
    for (auto& p : plans) {
      if (!p.full_space) p.scale = norm_alignment_factor(p.work_rows(), p.work_cols(), p.rank);
    }
  } else if (options.alignment == NormAlignment::scale_hyper) {
    const double mu_bar = hyper_alignment_factor(plans);
    for (auto& p : plans) {
      p.scale = p.full_space ? 1.0 / mu_bar
                             : norm_alignment_factor(p.work_rows(), p.work_cols(), p.rank) / mu_bar;
    }
  }
  return plans;
}

double hyper_alignment_factor(std::span<const LayerPlan> plans) {
  double entries = 0.0;
  double dof = 0.0;
  for (const auto& p : plans) {
    if (p.full_space) continue;
    entries += static_cast<double>(p.shape.m * p.shape.n);
    dof += static_cast<double>(p.rank * p.rank);
  }
  return dof > 0.0 ? std::sqrt(entries / dof) : 1.0;
}

ProjectionPair generate_proj_pair(GaussianStream& stream, std::size_t m, std::size_t n, std::size_t r) {
  if (r < 1 || r > std::min(m, n)) {
    throw ShapeError("generate_proj_pair: rank " + std::to_string(r) + " outside [1, min(" +
                     std::to_string(m) + ", " + std::to_string(n) + ")]");
  }
  Matrix r1 = gaussian_matrix(stream, m, r);
  Matrix r2 = gaussian_matrix(stream, n, r);
  return {qr_orthonormal(r1), qr_orthonormal(r2)};
}

Subspace generate_subspace(std::span<const LayerPlan> plans, std::uint64_t seed) {
  GaussianStream stream(seed);
  Subspace out;
  out.reserve(plans.size());
  for (const auto& plan : plans) {
    LayerSubspace layer{plan, std::nullopt};
    if (!plan.full_space) layer.pair = generate_proj_pair(stream, plan.work_rows(), plan.work_cols(), plan.rank);
    out.push_back(std::move(layer));
  }
  return out;
}

std::size_t subspace_dimension(const Subspace& subspace) {
  std::size_t q = 0;
  for (const auto& layer : subspace) q += layer.plan.dof();
  return q;
}

Matrix low_rank_perturbation(const ProjectionPair& pair, const Matrix& z) {
  const std::size_t r = pair.rank();
  if (z.rows() != r || z.cols() != r || pair.v.cols() != r) {
    throw ShapeError("low_rank_perturbation: z must be r x r with r = rank of the pair");
  }
  return matmul_nt(matmul(pair.u, z), pair.v);
}

void add_layer_perturbation(Matrix& weights, const LayerSubspace& layer, double coefficient,
                            GaussianStream& stream) {
  const LayerPlan& plan = layer.plan;
  if (weights.rows() != plan.shape.m || weights.cols() != plan.shape.n) {
    throw ShapeError("add_layer_perturbation: weights do not match the layer plan");
  }
  auto w = weights.data();
  const double c = coefficient * plan.scale;

  if (plan.full_space) {
    for (double& v : w) v += c * stream.next();
    return;
  }
  if (!layer.pair) throw ShapeError("add_layer_perturbation: subspace layer without a projection pair");

  const ProjectionPair& pair = *layer.pair;
  const std::size_t r = plan.rank;
  const std::size_t rows = plan.work_rows();
  const std::size_t cols = plan.work_cols();
  if (pair.u.rows() != rows || pair.v.rows() != cols || pair.rank() != r) {
    throw ShapeError("add_layer_perturbation: projection pair does not match the layer plan");
  }

  // z is consumed row-major; t = Z Vᵀ (r x cols); W_row(a) += c Σ_k U(a,k) t_row(k)
  std::vector<double> z(r * r);
  for (double& v : z) v = stream.next();
  std::vector<double> t(r * cols, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k < r; ++k) {
      const double zik = z[i * r + k];
      for (std::size_t j = 0; j < cols; ++j) t[i * cols + j] += zik * pair.v(j, k);
    }
  }
  for (std::size_t a = 0; a < rows; ++a) {
    double* out = w.data() + a * cols;
    for (std::size_t k = 0; k < r; ++k) {
      const double uak = c * pair.u(a, k);
      const double* trow = t.data() + k * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += uak * trow[j];
    }
  }
}

void perturb_params_inplace(std::span<Matrix> params, const Subspace& subspace, const PerturbSpec& spec) {
  if (params.size() != subspace.size()) throw ShapeError("perturb_params_inplace: layer count mismatch");
  if (!(spec.epsilon >= 0.0)) throw ShapeError("perturb_params_inplace: epsilon must be nonnegative");
  GaussianStream stream(spec.seed);
  const double coefficient = spec.direction * spec.epsilon;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (coefficient == 0.0) {
      stream.discard(subspace[i].plan.draws());
      continue;
    }
    add_layer_perturbation(params[i], subspace[i], coefficient, stream);
  }
}

LayerShape reshape_near_square(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) throw ShapeError("reshape_near_square: dimensions must be positive");
  const std::size_t total = m * n;
  // Largest divisor b <= sqrt(total) gives the smallest ratio a/b.
  std::size_t best_b = 1;
  for (std::size_t b = 1; b * b <= total; ++b) {
    if (total % b == 0) best_b = b;
  }
  const std::size_t best_a = total / best_b;
  if (std::max(m, n) == best_a && std::min(m, n) == best_b) return {m, n, m, n};
  return {m, n, best_a, best_b};
}

double norm_alignment_factor(std::size_t m, std::size_t n, std::size_t r) {
  if (r == 0) throw ShapeError("norm_alignment_factor: rank must be positive");
  return std::sqrt(static_cast<double>(m) * static_cast<double>(n)) / static_cast<double>(r);
}

}  // namespace subzero
