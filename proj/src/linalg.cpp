#include "subzero/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "subzero/errors.hpp"

namespace subzero {

Matrix qr_orthonormal(const Matrix& a) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (n == 0 || m < n) throw ShapeError("qr_orthonormal needs rows >= cols >= 1");
  if (!a.all_finite()) throw ShapeError("qr_orthonormal input has non-finite entries");

  // Factor in place; column j below the diagonal ends up holding the
  // Householder vector v_j (with v_j[j] stored separately in `head`).
  Matrix r = a;
  std::vector<double> head(n);
  std::vector<double> beta(n);
  std::vector<double> rdiag(n);

  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    {
      std::vector<double> col(m - j);
      for (std::size_t i = j; i < m; ++i) col[i - j] = r(i, j);
      norm = norm2(col);
    }
    if (norm == 0.0) {
      head[j] = 0.0;
      beta[j] = 0.0;
      rdiag[j] = 0.0;
      continue;
    }
    const double alpha = r(j, j) >= 0.0 ? -norm : norm;
    const double v0 = r(j, j) - alpha;
    double vnorm_sq = v0 * v0;
    for (std::size_t i = j + 1; i < m; ++i) vnorm_sq += r(i, j) * r(i, j);
    head[j] = v0;
    beta[j] = vnorm_sq > 0.0 ? 2.0 / vnorm_sq : 0.0;
    rdiag[j] = alpha;

    for (std::size_t k = j + 1; k < n; ++k) {
      double s = v0 * r(j, k);
      for (std::size_t i = j + 1; i < m; ++i) s += r(i, j) * r(i, k);
      s *= beta[j];
      r(j, k) -= s * v0;
      for (std::size_t i = j + 1; i < m; ++i) r(i, k) -= s * r(i, j);
    }
  }

  double largest = 0.0;
  double smallest = INFINITY;
  for (double d : rdiag) {
    largest = std::max(largest, std::abs(d));
    smallest = std::min(smallest, std::abs(d));
  }
  if (largest == 0.0 || smallest < 1e-12 * largest) {
    throw RankDeficient("qr_orthonormal: input is numerically rank deficient");
  }

  // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I, back to front.
  Matrix q = Matrix::identity(m, n);
  for (std::size_t jj = n; jj-- > 0;) {
    if (beta[jj] == 0.0) continue;
    for (std::size_t k = 0; k < n; ++k) {
      double s = head[jj] * q(jj, k);
      for (std::size_t i = jj + 1; i < m; ++i) s += r(i, jj) * q(i, k);
      s *= beta[jj];
      q(jj, k) -= s * head[jj];
      for (std::size_t i = jj + 1; i < m; ++i) q(i, k) -= s * r(i, jj);
    }
  }

  // Force diag(R) > 0: flip the matching column of Q where R_jj < 0.
  for (std::size_t j = 0; j < n; ++j) {
    if (rdiag[j] < 0.0) {
      for (std::size_t i = 0; i < m; ++i) q(i, j) = -q(i, j);
    }
  }
  return q;
}

}  // namespace subzero

namespace subzero {

double largest_eigenvalue(const Matrix& a, double tol, std::size_t max_iter) {
  if (a.rows() != a.cols() || a.rows() == 0) throw ShapeError("largest_eigenvalue needs a square matrix");
  const std::size_t n = a.rows();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  double lambda = 0.0;
  std::vector<double> y(n);
  for (std::size_t it = 0; it < max_iter; ++it) {
    const double xn = norm2(x);
    for (double& v : x) v /= xn;
    for (std::size_t i = 0; i < n; ++i) y[i] = dot(a.row(i), x);
    const double next = dot(x, y);
    std::swap(x, y);
    if (it > 0 && std::abs(next - lambda) <= tol * std::abs(next)) return next;
    lambda = next;
  }
  return lambda;
}

}  // namespace subzero

namespace subzero {

std::vector<double> solve_spd(const Matrix& a, std::span<const double> b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw ShapeError("solve_spd: dimension mismatch");
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw RankDeficient("solve_spd: matrix is not positive definite");
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= l(i, k) * y[k];
    y[i] /= l(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) y[i] -= l(k, i) * y[k];
    y[i] /= l(i, i);
  }
  return y;
}

}  // namespace subzero
