#include "subzero/optimizer.hpp"

#include <chrono>
#include <cmath>
#include <string>

#include "subzero/errors.hpp"
#include "subzero/problems.hpp"

namespace subzero {
namespace {

constexpr std::uint64_t kStepTag = 0x5354ull;
constexpr std::uint64_t kSubspaceTag = 0x5355ull;
constexpr std::uint64_t kBatchTag = 0x5356ull;
constexpr std::uint64_t kInitTag = 0x5357ull;

double hyper_factor(const OptimizerConfig& config, const Subspace& subspace) {
  if (config.norm_alignment_mode != NormAlignment::scale_hyper) return 1.0;
  std::vector<LayerPlan> plans;
  plans.reserve(subspace.size());
  for (const auto& layer : subspace) plans.push_back(layer.plan);
  return hyper_alignment_factor(plans);
}

}  // namespace

double LearningRateSchedule::at(std::uint64_t step, std::uint64_t budget) const noexcept {
  if (kind == Kind::constant || budget == 0) return initial;
  return initial * (1.0 - static_cast<double>(step) / static_cast<double>(budget));
}

LearningRateSchedule::Kind default_schedule(EstimatorFamily family) noexcept {
  return family == EstimatorFamily::exact_sgd ? LearningRateSchedule::Kind::linear_decay
                                              : LearningRateSchedule::Kind::constant;
}

void validate(const OptimizerConfig& c) {
  if (c.rank < 1) throw ConfigError("rank must be >= 1");
  if (!(c.epsilon > 0.0) || !std::isfinite(c.epsilon)) throw ConfigError("epsilon must be positive");
  if (c.subspace_change_frequency < 1) throw ConfigError("subspace_change_frequency must be >= 1");
  if (c.step_budget < 1) throw ConfigError("step_budget must be >= 1");
  if (!(c.learning_rate.initial > 0.0) || !std::isfinite(c.learning_rate.initial)) {
    throw ConfigError("learning rate must be positive");
  }
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.estimator_family == EstimatorFamily::spsa_dense_subspace && c.dense_q < 1) {
    throw ConfigError("dense_q must be >= 1");
  }
}

std::uint64_t step_seed(std::uint64_t master_seed, std::uint64_t step) noexcept {
  return derive_seed(master_seed, {kStepTag, step});
}

std::uint64_t subspace_seed(std::uint64_t master_seed, std::uint64_t step) noexcept {
  return derive_seed(master_seed, {kSubspaceTag, step});
}

std::vector<LayerPlan> plan_for(const OptimizerConfig& config, std::span<const Shape> shapes) {
  PlanOptions options;
  options.rank = config.rank;
  options.reshape = config.reshape;
  options.alignment = config.norm_alignment_mode;
  options.force_full_space = config.estimator_family == EstimatorFamily::spsa_full;
  return plan_layers(shapes, options);
}

TrainerState initial_state(const Problem& problem, const OptimizerConfig& config) {
  return initial_state(problem.initial_params(derive_seed(config.master_seed, {kInitTag})), config);
}

TrainerState initial_state(ParamSet params, const OptimizerConfig& config) {
  validate(config);
  TrainerState state;
  state.params = std::move(params);
  if (config.estimator_family == EstimatorFamily::spsa_full) {
    state.subspace = full_space_subspace(shapes_of(state.params));
  }
  return state;
}

StepRecord step(TrainerState& state, const OptimizerConfig& config, const Problem& problem,
                const Minibatch& batch) {
  const auto started = std::chrono::steady_clock::now();
  const std::uint64_t t = state.step;
  StepRecord rec;
  rec.step = t;
  rec.lr = config.learning_rate.at(t, config.step_budget);

  try {
    switch (config.estimator_family) {
      case EstimatorFamily::subzero: {
        const bool due = t % config.subspace_change_frequency == 0 || state.subspace.empty();
        if (!state.subspace_fixed && due) {
          const auto plans = plan_for(config, shapes_of(state.params));
          state.subspace = generate_subspace(plans, subspace_seed(config.master_seed, t));
          ++state.regenerations;
        }
        [[fallthrough]];
      }
      case EstimatorFamily::spsa_full: {
        const double mu = hyper_factor(config, state.subspace);
        const double epsilon = config.epsilon * mu;
        rec.lr *= mu * mu;
        const std::uint64_t seed = step_seed(config.master_seed, t);
        const auto diff = measure_loss_difference(problem, state.params, state.subspace, batch, epsilon, seed);
        rec.loss_plus = diff.loss_plus;
        rec.loss_minus = diff.loss_minus;
        rec.rho = diff.rho;
        // Per-layer update: regenerate Z_i and apply -η ρ U_i Z_i V_iᵀ in place.
        GaussianStream stream(seed);
        for (std::size_t i = 0; i < state.params.size(); ++i) {
          add_layer_perturbation(state.params[i], state.subspace[i], -rec.lr * diff.rho, stream);
        }
        break;
      }
      case EstimatorFamily::spsa_dense_subspace: {
        DenseSubspaceOptions options;
        options.max_projection_values = config.dense_max_values;
        const auto est = spsa_dense_subspace(problem, state.params, batch, config.epsilon, config.dense_q,
                                             step_seed(config.master_seed, t), options);
        rec.loss_plus = est.difference.loss_plus;
        rec.loss_minus = est.difference.loss_minus;
        rec.rho = est.difference.rho;
        for (std::size_t i = 0; i < state.params.size(); ++i) {
          state.params[i] -= rec.lr * est.gradient.layers[i];
        }
        break;
      }
      case EstimatorFamily::exact_sgd: {
        const double value = problem.loss(state.params, batch);
        rec.loss_plus = value;
        rec.loss_minus = value;
        const ParamSet g = problem.gradient(state.params, batch);
        for (std::size_t i = 0; i < state.params.size(); ++i) state.params[i] -= rec.lr * g[i];
        break;
      }
    }
  } catch (const NonFiniteLoss& e) {
    throw NonFiniteLoss("step " + std::to_string(t) + ": " + e.what(), static_cast<long>(t));
  }

  ++state.step;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return rec;
}

RunRecord train(const Problem& problem, const OptimizerConfig& config) {
  return train(problem, config, initial_state(problem, config));
}

RunRecord train(const Problem& problem, const OptimizerConfig& config, TrainerState state) {
  validate(config);
  if (config.batch_size > problem.dataset_size()) throw ConfigError("batch_size exceeds the dataset size");
  RunRecord record;
  record.steps.reserve(config.step_budget);
  const std::uint64_t batch_seed = derive_seed(config.master_seed, {kBatchTag});
  const Minibatch full = problem.full_batch();
  while (state.step < config.step_budget) {
    const Minibatch batch = sample_minibatch(problem, batch_seed, state.step, config.batch_size);
    record.steps.push_back(step(state, config, problem, batch));
    if (config.eval_interval > 0 &&
        (state.step % config.eval_interval == 0 || state.step == config.step_budget)) {
      record.validation.push_back({state.step, problem.loss(state.params, full)});
    }
  }
  record.final_params = std::move(state.params);
  return record;
}

double theoretical_step_size(std::size_t q, double l1) {
  if (q < 1 || !(l1 > 0.0)) throw ConfigError("theoretical_step_size needs q >= 1 and L1 > 0");
  return 1.0 / (4.0 * (static_cast<double>(q) + 4.0) * l1);
}

SmoothnessEstimate smoothness_constant(const Problem& problem, std::span<const Matrix> center,
                                       std::size_t pairs, double radius, std::uint64_t seed) {
  if (auto exact = problem.smoothness()) return {*exact, true};
  const Minibatch batch = problem.full_batch();
  GaussianStream stream(seed);
  double best = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    ParamSet x(center.begin(), center.end());
    ParamSet y(center.begin(), center.end());
    double dist_sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t e = 0; e < x[i].size(); ++e) {
        const double dx = radius * stream.next();
        const double dy = radius * stream.next();
        x[i].data()[e] += dx;
        y[i].data()[e] += dy;
        dist_sq += (dx - dy) * (dx - dy);
      }
    }
    const ParamSet gx = fd_gradient(problem, x, batch);
    const ParamSet gy = fd_gradient(problem, y, batch);
    double diff_sq = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double n = fro_norm(gx[i] - gy[i]);
      diff_sq += n * n;
    }
    if (dist_sq > 0.0) best = std::max(best, std::sqrt(diff_sq / dist_sq));
  }
  return {best, false};
}

}  // namespace subzero
