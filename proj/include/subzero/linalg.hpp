#pragma once

#include <span>
#include <vector>

#include "subzero/matrix.hpp"

namespace subzero {

/// Thin Q of a Householder QR of `a` (rows >= cols), signs fixed so that
/// diag(R) > 0. Throws RankDeficient when min|R_jj| < 1e-12 * max|R_jj|.
Matrix qr_orthonormal(const Matrix& a);

}  // namespace subzero

namespace subzero {

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration from a fixed start vector; stops when the Rayleigh quotient
/// changes by less than `tol` relative.
double largest_eigenvalue(const Matrix& symmetric, double tol = 1e-13, std::size_t max_iter = 100000);

}  // namespace subzero

namespace subzero {

/// Solves A x = b for symmetric positive definite A by Cholesky.
/// Throws RankDeficient when A is not numerically positive definite.
std::vector<double> solve_spd(const Matrix& a, std::span<const double> b);

}  // namespace subzero
