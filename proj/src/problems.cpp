#include "subzero/problems.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subzero/errors.hpp"
#include "subzero/linalg.hpp"
#include "subzero/random.hpp"

namespace subzero {

Minibatch sample_minibatch(std::size_t n, std::uint64_t seed, std::uint64_t step, std::size_t size) {
  if (size == 0 || size > n) throw ConfigError("minibatch size must lie in [1, dataset size]");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  if (size == n) return {std::move(pool)};
  // Partial Fisher-Yates driven by counter-based uniforms.
  const std::uint64_t key = derive_seed(seed, {0x6D62ull, step});
  for (std::size_t i = 0; i < size; ++i) {
    const double u = GaussianStream::uniform_at(key, i);
    const std::size_t span = n - i;
    const std::size_t j = i + std::min(span - 1, static_cast<std::size_t>(u * static_cast<double>(span)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(size);
  return {std::move(pool)};
}

Minibatch sample_minibatch(const Problem& problem, std::uint64_t seed, std::uint64_t step, std::size_t size) {
  return sample_minibatch(problem.dataset_size(), seed, step, size);
}

std::vector<double> flatten(std::span<const Matrix> params) {
  std::vector<double> flat;
  for (const auto& p : params) flat.insert(flat.end(), p.data().begin(), p.data().end());
  return flat;
}

ParamSet unflatten(std::span<const double> flat, std::span<const Shape> shapes) {
  if (flat.size() != total_size(shapes)) throw ShapeError("unflatten: length does not match shapes");
  ParamSet out;
  std::size_t offset = 0;
  for (const auto& s : shapes) {
    out.emplace_back(s.rows, s.cols, std::vector<double>(flat.begin() + offset, flat.begin() + offset + s.size()));
    offset += s.size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quadratic

namespace {

ParamSet gaussian_params(std::span<const Shape> shapes, std::uint64_t seed, double scale) {
  GaussianStream stream(seed);
  ParamSet out;
  for (const auto& s : shapes) {
    Matrix m = gaussian_matrix(stream, s.rows, s.cols);
    m *= scale;
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

QuadraticProblem::QuadraticProblem(Options options)
    : shapes_(std::move(options.shapes)), dim_(total_size(shapes_)), diagonal_(options.diagonal) {
  if (dim_ == 0) throw ConfigError("quadratic problem needs at least one parameter");
  if (!(options.condition_number >= 1.0)) throw ConfigError("condition number must be >= 1");
  const double log_kappa = std::log(options.condition_number);
  eigenvalues_.resize(dim_);
  for (std::size_t i = 0; i < dim_; ++i) {
    const double frac = dim_ == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(dim_ - 1);
    eigenvalues_[i] = std::exp(log_kappa * frac);
  }
  // Shuffle the spectrum so the diagonal case does not tie curvature to layer order.
  const std::uint64_t key = derive_seed(options.seed, {0x51ull});
  for (std::size_t i = dim_; i-- > 1;) {
    const std::size_t j = std::min(i, static_cast<std::size_t>(GaussianStream::uniform_at(key, i) * static_cast<double>(i + 1)));
    std::swap(eigenvalues_[i], eigenvalues_[j]);
  }
  largest_eig_ = *std::max_element(eigenvalues_.begin(), eigenvalues_.end());

  if (!diagonal_) {
    GaussianStream stream(derive_seed(options.seed, {0x52ull}));
    const Matrix q = qr_orthonormal(gaussian_matrix(stream, dim_, dim_));
    h_ = Matrix(dim_, dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = i; j < dim_; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) s += q(i, k) * eigenvalues_[k] * q(j, k);
        h_(i, j) = s;
        h_(j, i) = s;
      }
    }
  }
  if (options.linear_term) {
    GaussianStream stream(derive_seed(options.seed, {0x53ull}));
    linear_.resize(dim_);
    for (double& v : linear_) v = stream.next();
  }
}

QuadraticProblem::QuadraticProblem(std::vector<Shape> shapes, Matrix hessian, std::vector<double> linear)
    : shapes_(std::move(shapes)), dim_(total_size(shapes_)), h_(std::move(hessian)), linear_(std::move(linear)) {
  if (h_.rows() != dim_ || h_.cols() != dim_) throw ShapeError("hessian must be d x d");
  if (!linear_.empty() && linear_.size() != dim_) throw ShapeError("linear term must have length d");
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(h_(i, j) - h_(j, i)) > 1e-12 * (1.0 + std::abs(h_(i, j)))) throw ShapeError("hessian must be symmetric");
  largest_eig_ = largest_eigenvalue(h_);
}

Matrix QuadraticProblem::hessian() const {
  if (!diagonal_) return h_;
  if (dim_ > 4096) throw ShapeError("refusing to densify a large diagonal hessian");
  Matrix h(dim_, dim_);
  for (std::size_t i = 0; i < dim_; ++i) h(i, i) = eigenvalues_[i];
  return h;
}

void QuadraticProblem::apply_hessian(std::span<const double> x, std::span<double> out) const {
  if (x.size() != dim_ || out.size() != dim_) throw ShapeError("apply_hessian: length mismatch");
  if (diagonal_) {
    for (std::size_t i = 0; i < dim_; ++i) out[i] = eigenvalues_[i] * x[i];
  } else {
    for (std::size_t i = 0; i < dim_; ++i) out[i] = dot(h_.row(i), x);
  }
}

ParamSet QuadraticProblem::initial_params(std::uint64_t seed) const { return gaussian_params(shapes_, seed, 1.0); }

double QuadraticProblem::do_loss(std::span<const Matrix> params, const Minibatch&) const {
  if (params.size() != shapes_.size()) throw ShapeError("quadratic: wrong number of layers");
  // Walks the layers directly so no d-length scratch vector is needed.
  double value = 0.0;
  std::size_t i = 0;
  for (const auto& li : params) {
    for (double xi : li.data()) {
      if (diagonal_) {
        value += eigenvalues_[i] * xi * xi;
      } else {
        const auto hrow = h_.row(i);
        double hx = 0.0;
        std::size_t j = 0;
        for (const auto& lj : params) {
          for (double xj : lj.data()) hx += hrow[j++] * xj;
        }
        value += xi * hx;
      }
      if (!linear_.empty()) value += linear_[i] * xi;
      ++i;
    }
  }
  if (i != dim_) throw ShapeError("quadratic: parameter size mismatch");
  return value;
}

ParamSet QuadraticProblem::do_gradient(std::span<const Matrix> params, const Minibatch&) const {
  const auto x = flatten(params);
  std::vector<double> g(dim_);
  apply_hessian(x, g);
  for (std::size_t i = 0; i < dim_; ++i) g[i] = 2.0 * g[i] + (linear_.empty() ? 0.0 : linear_[i]);
  return unflatten(g, shapes_);
}

// ---------------------------------------------------------------------------
// Logistic

namespace {

double log1p_exp(double t) { return t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }
double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

LogisticProblem::LogisticProblem(Options options) : shape_(options.weight_shape), l2_(options.l2) {
  const std::size_t d = shape_.size();
  const std::size_t n = options.samples;
  if (d == 0 || n == 0) throw ConfigError("logistic problem needs d >= 1 and N >= 1");
  if (l2_ < 0.0) throw ConfigError("l2 must be nonnegative");
  GaussianStream stream(derive_seed(options.seed, {0x10ull}));
  features_ = gaussian_matrix(stream, n, d);
  labels_.resize(n);

  if (options.centered_balanced) {
    for (std::size_t k = 0; k < d; ++k) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += features_(i, k);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) features_(i, k) -= mean;
    }
    // Exactly floor(N/2) ones, assigned independently of the features.
    if (n >= 2) {
      for (std::size_t idx : sample_minibatch(n, derive_seed(options.seed, {0x11ull}), 0, n / 2).indices) {
        labels_[idx] = 1.0;
      }
    }
  } else {
    std::vector<double> planted(d);
    for (double& v : planted) v = stream.next() * 2.0 / std::sqrt(static_cast<double>(d));
    const std::uint64_t key = derive_seed(options.seed, {0x12ull});
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(dot(features_.row(i), planted));
      labels_[i] = GaussianStream::uniform_at(key, i) < p ? 1.0 : 0.0;
    }
  }
  smoothness_ = largest_eigenvalue(matmul_tn(features_, features_)) / (4.0 * static_cast<double>(n)) + l2_;
}

ParamSet LogisticProblem::initial_params(std::uint64_t seed) const {
  return gaussian_params(std::vector<Shape>{shape_}, seed, 0.1);
}

double LogisticProblem::do_loss(std::span<const Matrix> params, const Minibatch& batch) const {
  if (params.size() != 1 || params[0].size() != shape_.size()) throw ShapeError("logistic: wrong parameter shape");
  if (batch.size() == 0) throw ShapeError("logistic: empty minibatch");
  const auto w = params[0].data();
  double total = 0.0;
  for (std::size_t i : batch.indices) {
    const double t = dot(features_.row(i), w);
    total += log1p_exp(t) - labels_[i] * t;
  }
  const double reg = 0.5 * l2_ * dot(w, w);
  return total / static_cast<double>(batch.size()) + reg;
}

ParamSet LogisticProblem::do_gradient(std::span<const Matrix> params, const Minibatch& batch) const {
  const auto w = params[0].data();
  Matrix g(shape_.rows, shape_.cols);
  auto gd = g.data();
  for (std::size_t i : batch.indices) {
    const auto x = features_.row(i);
    const double residual = sigmoid(dot(x, w)) - labels_[i];
    for (std::size_t k = 0; k < gd.size(); ++k) gd[k] += residual * x[k];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t k = 0; k < gd.size(); ++k) gd[k] = gd[k] * inv + l2_ * w[k];
  return {std::move(g)};
}

// ---------------------------------------------------------------------------
// MLP

namespace {

// Activations of every layer for one input row; returns the output.
void mlp_forward(std::span<const Matrix> params, std::span<const double> input,
                 std::vector<std::vector<double>>& acts) {
  const std::size_t layers = params.size() / 2;
  acts.resize(layers + 1);
  acts[0].assign(input.begin(), input.end());
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix& w = params[2 * l];
    const Matrix& b = params[2 * l + 1];
    auto& out = acts[l + 1];
    out.resize(w.rows());
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double pre = dot(w.row(o), acts[l]) + b(o, 0);
      out[o] = (l + 1 < layers) ? std::tanh(pre) : pre;
    }
  }
}

}  // namespace

MlpProblem::MlpProblem(Options options) : widths_(std::move(options.widths)), init_scale_(options.init_scale) {
  if (widths_.size() < 2) throw ConfigError("mlp needs at least input and output widths");
  for (auto w : widths_)
    if (w == 0) throw ConfigError("mlp widths must be positive");
  if (options.samples == 0) throw ConfigError("mlp needs at least one sample");
  GaussianStream stream(derive_seed(options.seed, {0x20ull}));
  inputs_ = gaussian_matrix(stream, options.samples, widths_.front());
  targets_ = Matrix(options.samples, widths_.back());
  if (!options.zero_targets) {
    const ParamSet teacher = initial_params(derive_seed(options.seed, {0x21ull}));
    std::vector<std::vector<double>> acts;
    GaussianStream noise(derive_seed(options.seed, {0x22ull}));
    for (std::size_t i = 0; i < options.samples; ++i) {
      mlp_forward(teacher, inputs_.row(i), acts);
      for (std::size_t o = 0; o < widths_.back(); ++o) targets_(i, o) = acts.back()[o] + options.noise * noise.next();
    }
  }
}

std::vector<Shape> MlpProblem::shapes() const {
  std::vector<Shape> out;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    out.push_back({widths_[l + 1], widths_[l]});
    out.push_back({widths_[l + 1], 1});
  }
  return out;
}

ParamSet MlpProblem::initial_params(std::uint64_t seed) const {
  GaussianStream stream(seed);
  ParamSet out;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    Matrix w = gaussian_matrix(stream, widths_[l + 1], widths_[l]);
    w *= init_scale_ / std::sqrt(static_cast<double>(widths_[l]));
    out.push_back(std::move(w));
    out.emplace_back(widths_[l + 1], 1);
  }
  return out;
}

double MlpProblem::do_loss(std::span<const Matrix> params, const Minibatch& batch) const {
  if (params.size() != 2 * (widths_.size() - 1)) throw ShapeError("mlp: wrong number of parameter layers");
  if (batch.size() == 0) throw ShapeError("mlp: empty minibatch");
  std::vector<std::vector<double>> acts;
  double total = 0.0;
  for (std::size_t i : batch.indices) {
    mlp_forward(params, inputs_.row(i), acts);
    for (std::size_t o = 0; o < widths_.back(); ++o) {
      const double e = acts.back()[o] - targets_(i, o);
      total += e * e;
    }
  }
  return total / static_cast<double>(batch.size());
}

ParamSet MlpProblem::do_gradient(std::span<const Matrix> params, const Minibatch& batch) const {
  const std::size_t layers = widths_.size() - 1;
  ParamSet grad;
  for (const auto& p : params) grad.emplace_back(p.rows(), p.cols());
  std::vector<std::vector<double>> acts;
  std::vector<double> delta;
  std::vector<double> prev;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i : batch.indices) {
    mlp_forward(params, inputs_.row(i), acts);
    delta.resize(widths_.back());
    for (std::size_t o = 0; o < widths_.back(); ++o) delta[o] = 2.0 * (acts.back()[o] - targets_(i, o)) * inv;
    for (std::size_t l = layers; l-- > 0;) {
      const Matrix& w = params[2 * l];
      Matrix& gw = grad[2 * l];
      Matrix& gb = grad[2 * l + 1];
      for (std::size_t o = 0; o < w.rows(); ++o) {
        gb(o, 0) += delta[o];
        for (std::size_t k = 0; k < w.cols(); ++k) gw(o, k) += delta[o] * acts[l][k];
      }
      if (l == 0) break;
      prev.assign(w.cols(), 0.0);
      for (std::size_t o = 0; o < w.rows(); ++o)
        for (std::size_t k = 0; k < w.cols(); ++k) prev[k] += w(o, k) * delta[o];
      for (std::size_t k = 0; k < prev.size(); ++k) prev[k] *= 1.0 - acts[l][k] * acts[l][k];
      std::swap(delta, prev);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Quartic

ParamSet QuarticProblem::initial_params(std::uint64_t seed) const { return gaussian_params(shapes_, seed, 0.5); }

double QuarticProblem::do_loss(std::span<const Matrix> params, const Minibatch&) const {
  double value = 0.0;
  for (const auto& p : params)
    for (double v : p.data()) value += (v * v) * (v * v);
  return value;
}

ParamSet QuarticProblem::do_gradient(std::span<const Matrix> params, const Minibatch&) const {
  ParamSet g;
  for (const auto& p : params) {
    Matrix m(p.rows(), p.cols());
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double v = p.data()[k];
      m.data()[k] = 4.0 * v * v * v;
    }
    g.push_back(std::move(m));
  }
  return g;
}

}  // namespace subzero
