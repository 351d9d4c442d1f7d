#include "subzero/problem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subzero/errors.hpp"

namespace subzero {

std::vector<Shape> shapes_of(std::span<const Matrix> params) {
  std::vector<Shape> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.rows(), p.cols()});
  return out;
}

std::size_t total_size(std::span<const Shape> shapes) {
  return std::accumulate(shapes.begin(), shapes.end(), std::size_t{0},
                         [](std::size_t acc, const Shape& s) { return acc + s.size(); });
}

double Problem::loss(std::span<const Matrix> params, const Minibatch& batch) const {
  check_shapes(params);
  evaluations_.fetch_add(1, std::memory_order_relaxed);
  const double value = do_loss(params, batch);
  if (!std::isfinite(value)) throw NonFiniteLoss(name() + ": loss evaluated to a non-finite value");
  return value;
}

ParamSet Problem::gradient(std::span<const Matrix> params, const Minibatch& batch) const {
  check_shapes(params);
  ParamSet g = do_gradient(params, batch);
  for (const auto& layer : g) {
    if (!layer.all_finite()) throw NonFiniteLoss(name() + ": gradient has non-finite entries");
  }
  return g;
}

Minibatch Problem::full_batch() const {
  Minibatch b;
  b.indices.resize(dataset_size());
  std::iota(b.indices.begin(), b.indices.end(), std::size_t{0});
  return b;
}

void Problem::check_shapes(std::span<const Matrix> params) const {
  const auto expected = shapes();
  if (expected.size() != params.size()) throw ShapeError(name() + ": wrong number of parameter layers");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != expected[i].rows || params[i].cols() != expected[i].cols) {
      throw ShapeError(name() + ": parameter layer " + std::to_string(i) + " has the wrong shape");
    }
  }
}

ParamSet fd_gradient(const Problem& problem, std::span<const Matrix> params, const Minibatch& batch,
                     FiniteDiffOracle oracle) {
  if (!(oracle.step > 0.0)) throw Error("fd_gradient: step must be positive");
  ParamSet work(params.begin(), params.end());
  ParamSet grad;
  grad.reserve(work.size());
  for (std::size_t layer = 0; layer < work.size(); ++layer) {
    Matrix g(work[layer].rows(), work[layer].cols());
    auto w = work[layer].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double saved = w[k];
      w[k] = saved + oracle.step;
      const double plus = problem.loss(work, batch);
      w[k] = saved - oracle.step;
      const double minus = problem.loss(work, batch);
      w[k] = saved;
      g.data()[k] = (plus - minus) / (2.0 * oracle.step);
    }
    grad.push_back(std::move(g));
  }
  return grad;
}

double relative_error(std::span<const Matrix> a, std::span<const Matrix> b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: layer count mismatch");
  double diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, max_abs_diff(a[i], b[i]));
    scale = std::max(scale, max_abs(b[i]));
  }
  return diff / scale;
}

}  // namespace subzero
