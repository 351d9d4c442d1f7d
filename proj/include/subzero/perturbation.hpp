#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "subzero/matrix.hpp"
#include "subzero/problem.hpp"
#include "subzero/random.hpp"

namespace subzero {

/// Column-orthonormal factors spanning one layer's perturbation subspace.
struct ProjectionPair {
  Matrix u;  // m x r
  Matrix v;  // n x r
  std::size_t rank() const noexcept { return u.cols(); }
};

/// Original and near-square working dimensions of a layer. The reshaped
/// view is the same row-major buffer read with different strides.
struct LayerShape {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t reshaped_m = 0;
  std::size_t reshaped_n = 0;
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct PerturbSpec {
  double epsilon = 1e-3;
  std::uint64_t seed = 0;
  double direction = 1.0;
};

enum class NormAlignment { off, scale_z, scale_hyper };

/// How one parameter matrix is perturbed.
///
/// Vector-shaped parameters (a dimension of 1) take the full-space path and
/// draw rows*cols values per perturbation; matrices draw rank*rank values and
/// are perturbed as `scale * U Z Vᵀ` in the (possibly reshaped) working shape.
struct LayerPlan {
  LayerShape shape;
  bool full_space = false;
  std::size_t rank = 0;
  double scale = 1.0;

  std::size_t work_rows() const noexcept { return shape.reshaped_m; }
  std::size_t work_cols() const noexcept { return shape.reshaped_n; }
  /// Gaussian values consumed per perturbation of this layer.
  std::size_t draws() const noexcept { return full_space ? shape.m * shape.n : rank * rank; }
  /// Degrees of freedom the layer contributes to q.
  std::size_t dof() const noexcept { return draws(); }
};

struct PlanOptions {
  std::size_t rank = 1;
  bool reshape = false;
  NormAlignment alignment = NormAlignment::off;
  /// Route every layer through the full-space path (plain SPSA).
  bool force_full_space = false;
};

std::vector<LayerPlan> plan_layers(std::span<const Shape> shapes, const PlanOptions& options);

/// μ̄ = sqrt(Σ m_i n_i / Σ r_i²) over subspace layers; the single factor by
/// which `scale_hyper` rescales ε (by μ̄) and η (by μ̄²).
double hyper_alignment_factor(std::span<const LayerPlan> plans);

struct LayerSubspace {
  LayerPlan plan;
  std::optional<ProjectionPair> pair;  // empty for full-space layers
};

using Subspace = std::vector<LayerSubspace>;

/// Draws an m x r Gaussian then an n x r Gaussian from `stream` and
/// orthonormalizes each. Requires 1 <= r <= min(m, n).
ProjectionPair generate_proj_pair(GaussianStream& stream, std::size_t m, std::size_t n, std::size_t r);

/// Pairs for every subspace layer, drawn in layer order from one stream.
Subspace generate_subspace(std::span<const LayerPlan> plans, std::uint64_t seed);

/// q = Σ dof over layers.
std::size_t subspace_dimension(const Subspace& subspace);

/// U z Vᵀ.
Matrix low_rank_perturbation(const ProjectionPair& pair, const Matrix& z);

/// W += coefficient * scale * (perturbation drawn from `stream`) for one layer.
/// Only an r x n' scratch is allocated for subspace layers, nothing for
/// full-space layers.
void add_layer_perturbation(Matrix& weights, const LayerSubspace& layer, double coefficient,
                            GaussianStream& stream);

/// Resets a stream with spec.seed and adds direction * ε * perturbation to
/// every layer in order.
void perturb_params_inplace(std::span<Matrix> params, const Subspace& subspace, const PerturbSpec& spec);

/// Divisor pair (a, b) of m*n with a >= b minimizing a/b.
LayerShape reshape_near_square(std::size_t m, std::size_t n);

/// sqrt(m n) / r.
double norm_alignment_factor(std::size_t m, std::size_t n, std::size_t r);

}  // namespace subzero
