#include <cmath>

#include "doctest.h"
#include "subzero/errors.hpp"
#include "subzero/linalg.hpp"
#include "subzero/problems.hpp"
#include "subzero/random.hpp"

using namespace subzero;

TEST_CASE("gaussian stream is a pure function of the seed") {
  GaussianStream a(7);
  GaussianStream b(7);
  CHECK(gaussian_matrix(a, 2, 2) == gaussian_matrix(b, 2, 2));

  GaussianStream c(7);
  const Matrix one = gaussian_matrix(c, 1, 1);
  CHECK(one(0, 0) == GaussianStream::at(7, 0));

  // Batching does not change the sequence.
  GaussianStream d(7);
  const Matrix big = gaussian_matrix(d, 3, 5);
  GaussianStream e(7);
  const Matrix head = gaussian_matrix(e, 2, 5);
  const Matrix tail = gaussian_matrix(e, 1, 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(big(0, k) == head(0, k));
    CHECK(big(2, k) == tail(0, k));
  }
  GaussianStream f(7);
  f.discard(11);
  CHECK(f.next() == big(2, 1));

  GaussianStream other(8);
  CHECK(other.next() != GaussianStream::at(7, 0));
}

TEST_CASE("gaussian stream moments over a million draws") {
  GaussianStream s(7);
  const std::size_t n = 1'000'000;
  double sum = 0.0;
  double sum_sq = 0.0;
  double sum_4 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = s.next();
    sum += v;
    sum_sq += v * v;
    sum_4 += v * v * v * v;
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
  CHECK(std::abs(sum_4 / n - 3.0) < 0.05);
}

TEST_CASE("gaussian_matrix rejects empty shapes") {
  GaussianStream s(1);
  CHECK_THROWS_AS(gaussian_matrix(s, 0, 3), ShapeError);
}

TEST_CASE("qr_orthonormal basic cases") {
  const Matrix q = qr_orthonormal(Matrix::identity(3));
  CHECK(max_abs_diff(matmul_tn(q, q), Matrix::identity(3)) < 1e-15);
  CHECK(max_abs_diff(q, Matrix::identity(3)) < 1e-15);

  GaussianStream s(1);
  const Matrix a = gaussian_matrix(s, 4, 2);
  const Matrix qa = qr_orthonormal(a);
  CHECK(qa.rows() == 4);
  CHECK(qa.cols() == 2);
  CHECK(max_abs_diff(matmul_tn(qa, qa), Matrix::identity(2)) < 1e-10);

  Matrix dup(4, 2);
  for (std::size_t i = 0; i < 4; ++i) dup(i, 0) = dup(i, 1) = a(i, 0);
  CHECK_THROWS_AS(qr_orthonormal(dup), RankDeficient);
  CHECK_THROWS_AS(qr_orthonormal(Matrix(2, 3, 1.0)), ShapeError);
}

TEST_CASE("qr_orthonormal: orthonormality, span and positive R diagonal on 1000 random shapes") {
  GaussianStream dims(2024);
  double worst_orth = 0.0;
  double worst_span = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + static_cast<std::size_t>(std::abs(dims.next()) * 6.0) % 24;
    const std::size_t r = 1 + static_cast<std::size_t>(std::abs(dims.next()) * 6.0) % m;
    GaussianStream s(derive_seed(99, {static_cast<std::uint64_t>(trial)}));
    const Matrix a = gaussian_matrix(s, m, r);
    const Matrix q = qr_orthonormal(a);
    worst_orth = std::max(worst_orth, max_abs_diff(matmul_tn(q, q), Matrix::identity(r)));
    // Q Qᵀ a reproduces a; R = Qᵀ a is upper triangular with positive diagonal.
    const Matrix r_factor = matmul_tn(q, a);
    const Matrix back = matmul(q, r_factor);
    worst_span = std::max(worst_span, max_abs_diff(back, a) / std::max(1.0, max_abs(a)));
    for (std::size_t j = 0; j < r; ++j) CHECK(r_factor(j, j) > 0.0);
  }
  CHECK(worst_orth < 1e-10);
  CHECK(worst_span < 1e-8);
}

TEST_CASE("fro_norm") {
  CHECK(fro_norm(Matrix(2, 2, 1.0)) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(fro_norm(Matrix(3, 3)) == 0.0);
  CHECK(fro_norm(Matrix{{3.0, 4.0}}) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(fro_norm(Matrix{{1e200, 1e200}}) == doctest::Approx(std::sqrt(2.0) * 1e200));
}

TEST_CASE("largest_eigenvalue and solve_spd on a known matrix") {
  const Matrix h{{2.0, 1.0}, {1.0, 2.0}};
  CHECK(largest_eigenvalue(h) == doctest::Approx(3.0).epsilon(1e-10));
  const std::vector<double> b{3.0, 3.0};
  const auto x = solve_spd(h, b);
  CHECK(x[0] == doctest::Approx(1.0));
  CHECK(x[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(solve_spd(Matrix{{1.0, 2.0}, {2.0, 1.0}}, b), RankDeficient);
}

TEST_CASE("fd_gradient on a linear loss returns its coefficients") {
  // f(x) = cᵀx expressed as a quadratic with H = 0.
  const std::vector<Shape> shapes{{2, 3}};
  std::vector<double> c{1.0, -2.0, 0.5, 3.0, 0.0, -1.25};
  const QuadraticProblem linear(shapes, Matrix(6, 6), c);
  GaussianStream s(5);
  const ParamSet x{gaussian_matrix(s, 2, 3)};
  const auto g = fd_gradient(linear, x, linear.full_batch());
  for (std::size_t k = 0; k < 6; ++k) CHECK(g[0].data()[k] == doctest::Approx(c[k]).epsilon(1e-9));
}

TEST_CASE("fd_gradient matches 2Hx on 100 random quadratics with d <= 50") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    GaussianStream dims(derive_seed(seed, {1}));
    const std::size_t rows = 1 + static_cast<std::size_t>(std::abs(dims.next()) * 3.0) % 7;
    const std::size_t cols = 1 + static_cast<std::size_t>(std::abs(dims.next()) * 3.0) % 7;
    QuadraticProblem::Options opts;
    opts.shapes = {{rows, cols}};
    opts.condition_number = 20.0;
    opts.seed = seed;
    const QuadraticProblem problem(opts);
    const ParamSet x = problem.initial_params(seed + 1000);
    const auto fd = fd_gradient(problem, x, problem.full_batch(), {1e-4});
    const auto exact = problem.gradient(x, problem.full_batch());
    worst = std::max(worst, relative_error(fd, exact));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("fd_gradient surfaces non-finite probes") {
  const std::vector<Shape> shapes{{1, 2}};
  const QuadraticProblem problem(shapes, Matrix::identity(2));
  const ParamSet x{Matrix{{1e300, 0.0}}};
  CHECK_THROWS_AS(fd_gradient(problem, x, problem.full_batch()), NonFiniteLoss);
}
