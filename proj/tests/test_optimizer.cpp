#include <cmath>

#include "alloc_tracker.hpp"
#include "doctest.h"
#include "subzero/errors.hpp"
#include "subzero/optimizer.hpp"
#include "subzero/problems.hpp"

using namespace subzero;

namespace {

QuadraticProblem small_quadratic(std::uint64_t seed = 3) {
  QuadraticProblem::Options opts;
  opts.shapes = {{6, 5}, {5, 1}};
  opts.condition_number = 5.0;
  opts.seed = seed;
  return QuadraticProblem(opts);
}

OptimizerConfig zo_config(double lr = 1e-3) {
  OptimizerConfig c;
  c.rank = 2;
  c.epsilon = 1e-3;
  c.subspace_change_frequency = 10;
  c.step_budget = 200;
  c.learning_rate = {LearningRateSchedule::Kind::constant, lr};
  c.master_seed = 5;
  c.eval_interval = 50;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  OptimizerConfig c = zo_config();
  CHECK_NOTHROW(validate(c));
  c.rank = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = zo_config();
  c.epsilon = 0.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = zo_config();
  c.subspace_change_frequency = 0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = zo_config();
  c.learning_rate.initial = -1.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = zo_config();
  c.batch_size = 2;
  CHECK_THROWS_AS(train(small_quadratic(), c), ConfigError);  // dataset of one row
}

TEST_CASE("learning-rate schedules") {
  const LearningRateSchedule constant{LearningRateSchedule::Kind::constant, 0.1};
  CHECK(constant.at(0, 100) == 0.1);
  CHECK(constant.at(99, 100) == 0.1);
  const LearningRateSchedule decay{LearningRateSchedule::Kind::linear_decay, 0.1};
  CHECK(decay.at(0, 100) == 0.1);
  CHECK(decay.at(50, 100) == doctest::Approx(0.05));
  CHECK(decay.at(99, 100) > 0.0);
  CHECK(default_schedule(EstimatorFamily::exact_sgd) == LearningRateSchedule::Kind::linear_decay);
  CHECK(default_schedule(EstimatorFamily::subzero) == LearningRateSchedule::Kind::constant);
}

TEST_CASE("theoretical step size") {
  CHECK(theoretical_step_size(1, 1.0) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(theoretical_step_size(4, 0.5) == doctest::Approx(1.0 / 16.0).epsilon(1e-15));
  CHECK_THROWS_AS(theoretical_step_size(0, 1.0), ConfigError);
}

TEST_CASE("smoothness constant: exact when reported, estimated otherwise") {
  const auto q = small_quadratic();
  const auto exact = smoothness_constant(q, q.initial_params(0));
  CHECK(exact.exact);
  CHECK(exact.value == doctest::Approx(10.0).epsilon(1e-8));

  MlpProblem::Options opts;
  opts.widths = {3, 4, 1};
  opts.samples = 16;
  const MlpProblem mlp(opts);
  const auto est = smoothness_constant(mlp, mlp.initial_params(1), 8);
  CHECK_FALSE(est.exact);
  CHECK(est.value > 0.0);
  CHECK(std::isfinite(est.value));
}

TEST_CASE("a zero projected difference leaves the parameters unchanged") {
  QuadraticProblem::Options opts;
  opts.shapes = {{4, 4}};
  const QuadraticProblem problem(opts);
  const OptimizerConfig config = zo_config(0.5);
  TrainerState state = initial_state(ParamSet{Matrix(4, 4)}, config);
  const auto rec = step(state, config, problem, problem.full_batch());
  // The +ε, -2ε, +ε passes accumulate per column of U, so symmetry holds up to rounding.
  CHECK(std::abs(rec.rho) < 1e-12);
  CHECK(max_abs(state.params[0]) < 1e-15);
  CHECK(state.step == 1);
}

TEST_CASE("lazy subspace regeneration") {
  const auto problem = small_quadratic();
  for (std::size_t t0 : {1u, 7u, 10u, 200u, 1000u}) {
    OptimizerConfig config = zo_config();
    config.subspace_change_frequency = t0;
    TrainerState state = initial_state(problem, config);
    Matrix u_first;
    for (std::size_t t = 0; t < config.step_budget; ++t) {
      step(state, config, problem, problem.full_batch());
      if (t == 0) u_first = state.subspace[0].pair->u;
    }
    CHECK(state.regenerations == (config.step_budget + t0 - 1) / t0);
    CHECK((state.subspace[0].pair->u == u_first) == (t0 >= config.step_budget));
  }
}

TEST_CASE("a fixed subspace is never regenerated") {
  const auto problem = small_quadratic();
  OptimizerConfig config = zo_config();
  config.subspace_change_frequency = 1;
  TrainerState state = initial_state(problem, config);
  state.subspace = generate_subspace(plan_for(config, problem.shapes()), 77);
  state.subspace_fixed = true;
  const Matrix u = state.subspace[0].pair->u;
  for (int t = 0; t < 20; ++t) step(state, config, problem, problem.full_batch());
  CHECK(state.regenerations == 0);
  CHECK(state.subspace[0].pair->u == u);
}

TEST_CASE("training is a pure function of the master seed") {
  const auto problem = small_quadratic();
  for (auto family : {EstimatorFamily::subzero, EstimatorFamily::spsa_full, EstimatorFamily::spsa_dense_subspace}) {
    OptimizerConfig config = zo_config();
    config.estimator_family = family;
    const auto a = train(problem, config);
    const auto b = train(problem, config);
    CHECK(a.final_params == b.final_params);
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].rho == b.steps[i].rho);
    config.master_seed += 1;
    CHECK(train(problem, config).final_params != a.final_params);
  }
}

TEST_CASE("records and validation cadence") {
  const auto problem = small_quadratic();
  const auto run = train(problem, zo_config());
  CHECK(run.steps.size() == 200);
  CHECK(run.steps.front().step == 0);
  CHECK(run.steps.back().step == 199);
  REQUIRE(run.validation.size() == 4);
  CHECK(run.validation[0].step == 50);
  CHECK(run.validation[3].step == 200);
  for (const auto& s : run.steps) {
    CHECK(s.rho == doctest::Approx((s.loss_plus - s.loss_minus) / 2e-3));
    CHECK(s.wall_ms >= 0.0);
  }
}

TEST_CASE("one subzero step moves each matrix layer inside its subspace") {
  const auto problem = small_quadratic();
  OptimizerConfig config = zo_config(1e-2);
  TrainerState state = initial_state(problem, config);
  const ParamSet before = state.params;
  step(state, config, problem, problem.full_batch());
  const auto& pair = *state.subspace[0].pair;
  const Matrix delta = state.params[0] - before[0];
  CHECK(fro_norm(delta) > 0.0);
  // (I - UUᵀ) Δ = 0 and Δ (I - VVᵀ) = 0
  const Matrix left = delta - matmul(pair.u, matmul_tn(pair.u, delta));
  const Matrix right = delta - matmul_nt(matmul(delta, pair.v), pair.v);
  CHECK(max_abs(left) < 1e-12 * max_abs(delta) + 1e-300);
  CHECK(max_abs(right) < 1e-12 * max_abs(delta) + 1e-300);
}

TEST_CASE("scale_z and scale_hyper produce the same trajectory") {
  QuadraticProblem::Options opts;
  opts.shapes = {{8, 8}, {6, 4}, {4, 1}};
  opts.seed = 4;
  const QuadraticProblem problem(opts);
  OptimizerConfig a = zo_config(1e-4);
  a.norm_alignment_mode = NormAlignment::scale_z;
  OptimizerConfig b = a;
  b.norm_alignment_mode = NormAlignment::scale_hyper;
  const auto ra = train(problem, a);
  const auto rb = train(problem, b);
  for (std::size_t i = 0; i < ra.final_params.size(); ++i) {
    CHECK(max_abs_diff(ra.final_params[i], rb.final_params[i]) < 1e-10 * (1.0 + max_abs(ra.final_params[i])));
  }
}

TEST_CASE("zeroth-order training reduces the loss; exact gradients do better") {
  const auto problem = small_quadratic();
  OptimizerConfig zo = zo_config(theoretical_step_size(8 + 5, problem.smoothness().value()));
  zo.step_budget = 2000;
  zo.eval_interval = 0;
  const auto batch = problem.full_batch();
  const double start = problem.loss(initial_state(problem, zo).params, batch);
  const auto zo_run = train(problem, zo);
  const double zo_final = problem.loss(zo_run.final_params, batch);
  CHECK(zo_final < 0.5 * start);

  OptimizerConfig sgd = zo;
  sgd.estimator_family = EstimatorFamily::exact_sgd;
  sgd.learning_rate = {LearningRateSchedule::Kind::linear_decay, 0.5 / problem.smoothness().value()};
  sgd.step_budget = 200;
  const auto sgd_run = train(problem, sgd);
  for (std::size_t i = 1; i < sgd_run.steps.size(); ++i) {
    CHECK(sgd_run.steps[i].loss_plus <= sgd_run.steps[i - 1].loss_plus);
  }
  CHECK(problem.loss(sgd_run.final_params, batch) < zo_final);
}

TEST_CASE("non-finite losses abort with the step index") {
  const auto problem = small_quadratic();
  OptimizerConfig config = zo_config(1e3);
  config.estimator_family = EstimatorFamily::exact_sgd;
  config.learning_rate.kind = LearningRateSchedule::Kind::constant;
  config.step_budget = 10'000;
  try {
    train(problem, config);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.step() > 0);
  }
}

TEST_CASE("memory contract: per-step scratch is O(r² + r n'), the dense subspace holds d q") {
  QuadraticProblem::Options opts;
  opts.shapes.assign(16, Shape{25, 25});
  opts.diagonal = true;
  const QuadraticProblem problem(opts);
  OptimizerConfig config = zo_config(1e-4);
  config.subspace_change_frequency = 1000;
  TrainerState state = initial_state(problem, config);
  const Minibatch batch = problem.full_batch();
  step(state, config, problem, batch);  // generates the subspace

  const std::size_t subzero_peak =
      alloc_tracker::measure_transient_peak([&] { step(state, config, problem, batch); });
  const std::size_t scratch = (2 * 2 + 2 * 25) * sizeof(double);
  CHECK(subzero_peak <= 2 * scratch + 256);
  CHECK(subzero_peak < 10'000 * sizeof(double));

  OptimizerConfig dense = config;
  dense.estimator_family = EstimatorFamily::spsa_dense_subspace;
  dense.dense_q = 64;
  TrainerState dense_state = initial_state(problem, dense);
  const std::size_t dense_peak =
      alloc_tracker::measure_transient_peak([&] { step(dense_state, dense, problem, batch); });
  CHECK(dense_peak >= dense_projection_values(10'000, 64) * sizeof(double));
  CHECK(dense_peak / subzero_peak >= 32);
}
