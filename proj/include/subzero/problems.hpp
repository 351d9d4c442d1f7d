#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "subzero/problem.hpp"

namespace subzero {

/// Uniform sample of `size` distinct rows out of [0, n), a pure function of
/// (seed, step). size == n returns 0..n-1 in order.
Minibatch sample_minibatch(std::size_t n, std::uint64_t seed, std::uint64_t step, std::size_t size);
Minibatch sample_minibatch(const Problem& problem, std::uint64_t seed, std::uint64_t step, std::size_t size);

/// f(x) = xᵀ H x + bᵀ x over the row-major concatenation x of all layers.
///
/// H = Q Λ Qᵀ with Λ log-uniform in [1, κ] (endpoints included) and Q the
/// orthonormal factor of a Gaussian matrix; `diagonal` skips the rotation and
/// keeps only Λ, for dimensions where a dense H would not fit.
class QuadraticProblem final : public Problem {
 public:
  struct Options {
    std::vector<Shape> shapes;
    double condition_number = 10.0;
    std::uint64_t seed = 0;
    bool diagonal = false;
    bool linear_term = false;
  };

  explicit QuadraticProblem(Options options);
  /// Explicit curvature (and optional linear term), one layer per shape.
  QuadraticProblem(std::vector<Shape> shapes, Matrix hessian, std::vector<double> linear = {});

  std::string name() const override { return "quadratic"; }
  std::vector<Shape> shapes() const override { return shapes_; }
  ParamSet initial_params(std::uint64_t seed) const override;
  std::optional<double> smoothness() const override { return 2.0 * largest_eig_; }

  std::size_t dimension() const noexcept { return dim_; }
  /// Dense H; throws ShapeError for diagonal problems larger than 4096.
  Matrix hessian() const;
  const std::vector<double>& eigenvalues() const noexcept { return eigenvalues_; }
  const std::vector<double>& linear() const noexcept { return linear_; }
  bool is_diagonal() const noexcept { return diagonal_; }

  /// x ↦ H x over flat vectors.
  void apply_hessian(std::span<const double> x, std::span<double> out) const;

 protected:
  double do_loss(std::span<const Matrix> params, const Minibatch& batch) const override;
  ParamSet do_gradient(std::span<const Matrix> params, const Minibatch& batch) const override;

 private:
  std::vector<Shape> shapes_;
  std::size_t dim_ = 0;
  bool diagonal_ = false;
  Matrix h_;                         // dense H (empty when diagonal)
  std::vector<double> eigenvalues_;  // Λ, or diag(H) when diagonal
  std::vector<double> linear_;
  double largest_eig_ = 0.0;
};

/// Mean logistic loss plus (l2/2)‖w‖², with the d weights held as one
/// d1 x d2 matrix. Labels are drawn from a planted logistic model.
class LogisticProblem final : public Problem {
 public:
  struct Options {
    Shape weight_shape{4, 5};
    std::size_t samples = 512;
    double l2 = 1e-3;
    std::uint64_t seed = 0;
    /// Center feature columns and balance labels exactly (half ones).
    bool centered_balanced = false;
  };

  explicit LogisticProblem(Options options);

  std::string name() const override { return "logistic"; }
  std::vector<Shape> shapes() const override { return {shape_}; }
  ParamSet initial_params(std::uint64_t seed) const override;
  std::size_t dataset_size() const override { return labels_.size(); }
  /// ‖X‖²₂ / (4N) + l2, with ‖X‖₂ from power iteration on XᵀX.
  std::optional<double> smoothness() const override { return smoothness_; }

  const Matrix& features() const noexcept { return features_; }
  const std::vector<double>& labels() const noexcept { return labels_; }

 protected:
  double do_loss(std::span<const Matrix> params, const Minibatch& batch) const override;
  ParamSet do_gradient(std::span<const Matrix> params, const Minibatch& batch) const override;

 private:
  Shape shape_;
  double l2_;
  Matrix features_;  // N x d
  std::vector<double> labels_;
  double smoothness_ = 0.0;
};

/// tanh MLP with an identity output layer and mean squared error against a
/// planted teacher network. Parameters alternate W_i (out x in), b_i (out x 1).
class MlpProblem final : public Problem {
 public:
  struct Options {
    std::vector<std::size_t> widths{8, 16, 16, 1};
    std::size_t samples = 512;
    std::uint64_t seed = 0;
    double init_scale = 1.0;
    double noise = 0.0;
    /// Zero targets (used by the all-zero sanity case).
    bool zero_targets = false;
  };

  explicit MlpProblem(Options options);

  std::string name() const override { return "mlp"; }
  std::vector<Shape> shapes() const override;
  ParamSet initial_params(std::uint64_t seed) const override;
  std::size_t dataset_size() const override { return inputs_.rows(); }

  const Matrix& inputs() const noexcept { return inputs_; }
  const Matrix& targets() const noexcept { return targets_; }

 protected:
  double do_loss(std::span<const Matrix> params, const Minibatch& batch) const override;
  ParamSet do_gradient(std::span<const Matrix> params, const Minibatch& batch) const override;

 private:
  std::vector<std::size_t> widths_;
  double init_scale_;
  Matrix inputs_;   // N x widths.front()
  Matrix targets_;  // N x widths.back()
};

/// f(x) = Σ_k x_k⁴ over the entries of every layer; smooth, convex, not
/// quadratic. Its Hessian diag(12 x²) is Lipschitz with constant 24 R on the
/// box |x_k| <= R.
class QuarticProblem final : public Problem {
 public:
  explicit QuarticProblem(std::vector<Shape> shapes) : shapes_(std::move(shapes)) {}

  std::string name() const override { return "quartic"; }
  std::vector<Shape> shapes() const override { return shapes_; }
  ParamSet initial_params(std::uint64_t seed) const override;

  static double hessian_lipschitz(double radius) noexcept { return 24.0 * radius; }

 protected:
  double do_loss(std::span<const Matrix> params, const Minibatch& batch) const override;
  ParamSet do_gradient(std::span<const Matrix> params, const Minibatch& batch) const override;

 private:
  std::vector<Shape> shapes_;
};

/// Flat row-major concatenation of a parameter set, and its inverse.
std::vector<double> flatten(std::span<const Matrix> params);
ParamSet unflatten(std::span<const double> flat, std::span<const Shape> shapes);

}  // namespace subzero
