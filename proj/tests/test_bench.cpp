#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "doctest.h"
#include "subzero/bench.hpp"
#include "subzero/errors.hpp"
#include "subzero/random.hpp"

using namespace subzero;
using namespace subzero::bench;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per call, removed by the destructor.
struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("subzero_bench_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExperimentConfig small_bench() {
  ExperimentConfig c;
  c.problem.family = "quadratic";
  c.problem.shapes = {{6, 5}, {5, 1}};
  c.problem.condition_number = 4.0;
  c.optimizer.rank = 2;
  c.optimizer.step_budget = 40;
  c.optimizer.learning_rate.initial = 1e-2;
  c.optimizer.subspace_change_frequency = 10;
  c.optimizer.eval_interval = 20;
  c.sweep.estimator_family = {EstimatorFamily::subzero, EstimatorFamily::spsa_full};
  c.sweep.seeds = {0, 1, 2};
  c.smoothing_window = 5;
  return c;
}

std::vector<fs::path> files_with_prefix(const fs::path& dir, const std::string& prefix) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename().string().rfind(prefix, 0) == 0) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Every column except the last (wall_ms).
std::vector<std::vector<std::string>> without_timing(std::vector<std::vector<std::string>> rows) {
  for (auto& r : rows) r.pop_back();
  return rows;
}

}  // namespace

TEST_CASE("config serialization round-trips") {
  ExperimentConfig c = small_bench();
  c.schedule_auto = false;
  c.optimizer.learning_rate.kind = LearningRateSchedule::Kind::linear_decay;
  c.optimizer.norm_alignment_mode = NormAlignment::scale_hyper;
  c.optimizer.epsilon = 0.1 + 0.2;
  c.optimizer.master_seed = 0xFFFFFFFFFFFFFFFFull;
  c.sweep.learning_rate = {1e-3, 3e-3};
  c.verification.bias_epsilons = {0.5, 0.05};
  c.estimate.families = {{EstimatorFamily::subzero, 3, 8}, {EstimatorFamily::spsa_dense_subspace, 2, 5}};
  c.output_dir = "some dir";
  CHECK(parse_config(serialize_config(c)) == c);
  CHECK(parse_config(serialize_config(ExperimentConfig{})) == ExperimentConfig{});
  CHECK(parse_config("{}") == ExperimentConfig{});
}

TEST_CASE("config parsing rejects unknown keys and wrong types") {
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"rnak": 2}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"extra": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"rank": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"rank": 1.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"epsilon": "small"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"reshape": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"optimizer": {"schedule": "cosine"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"sweep": {"estimator_family": ["adam"]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"problem": {"shapes": [[1, 2, 3]]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"estimate": {"families": [{"family": "subzero", "r": 2}]}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("config hash is stable and sensitive") {
  const ExperimentConfig a = small_bench();
  ExperimentConfig b = a;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.output_dir = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  b.optimizer.epsilon *= 2;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("apply_options shifts every seed and overrides the output directory") {
  ExperimentConfig c = small_bench();
  c.optimizer.master_seed = 5;
  c.verification.seed = 6;
  c.estimate.point_seed = 7;
  RunOptions o;
  o.seed_offset = 100;
  o.out_dir = "elsewhere";
  const auto shifted = apply_options(c, o);
  CHECK(shifted.optimizer.master_seed == 105);
  CHECK(shifted.sweep.seeds == std::vector<std::uint64_t>{100, 101, 102});
  CHECK(shifted.verification.seed == 106);
  CHECK(shifted.estimate.point_seed == 107);
  CHECK(shifted.output_dir == "elsewhere");
  CHECK(apply_options(c, {}) == c);
}

TEST_CASE("doubles survive a CSV round trip bit-exactly") {
  GaussianStream s(3);
  for (int i = 0; i < 2000; ++i) {
    const double v = s.next() * std::pow(10.0, static_cast<int>(s.next() * 40));
    CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
  }
  CHECK(format_double(std::nan("")) == "nan");
  CHECK(std::isnan(std::strtod("nan", nullptr)));
}

TEST_CASE("CSV writer quotes and the reader unquotes") {
  TempDir tmp;
  fs::create_directories(tmp.path);
  const auto path = tmp.path / "x.csv";
  {
    CsvWriter w(path, {"a", "b"});
    w.row({"plain", "with, comma"});
    w.row({"say \"hi\"", ""});
    CHECK_THROWS_AS(w.row({"one"}), Error);
  }
  const auto rows = read_csv(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1] == std::vector<std::string>{"plain", "with, comma"});
  CHECK(rows[2] == std::vector<std::string>{"say \"hi\"", ""});
}

TEST_CASE("sweep expansion order and schedule defaults") {
  ExperimentConfig c = small_bench();
  c.sweep.estimator_family = {EstimatorFamily::subzero, EstimatorFamily::exact_sgd};
  c.sweep.learning_rate = {1e-3, 1e-2};
  const auto cells = expand_sweep(c);
  REQUIRE(cells.size() == 2 * 2 * 3);
  CHECK(cells[0].config.master_seed == 0);
  CHECK(cells[1].config.master_seed == 1);
  CHECK(cells[3].config.learning_rate.initial == 1e-2);
  CHECK(cells[6].config.estimator_family == EstimatorFamily::exact_sgd);
  CHECK(cells[0].config.learning_rate.kind == LearningRateSchedule::Kind::constant);
  CHECK(cells[6].config.learning_rate.kind == LearningRateSchedule::Kind::linear_decay);
  for (std::size_t i = 0; i < cells.size(); ++i) CHECK(cells[i].index == i);

  c.schedule_auto = false;
  CHECK(expand_sweep(c)[6].config.learning_rate.kind == LearningRateSchedule::Kind::constant);
  CHECK(expand_sweep(ExperimentConfig{}).size() == 1);
}

TEST_CASE("smoothed losses are trailing means of the two-sided losses") {
  std::vector<StepRecord> steps;
  for (int i = 0; i < 5; ++i) steps.push_back({static_cast<std::uint64_t>(i), 2.0 * i, 2.0 * i + 2.0, 0, 0, 0});
  // midpoints 1, 3, 5, 7, 9
  const auto s = smoothed_losses(steps, 2);
  CHECK(s == std::vector<double>{1.0, 2.0, 4.0, 6.0, 8.0});
}

TEST_CASE("validation rejects preconditions before any run") {
  ExperimentConfig c = small_bench();
  CHECK_NOTHROW(validate_experiment(c, Command::bench));

  ExperimentConfig r = c;
  r.sweep.rank = {2, 6};
  CHECK_THROWS_AS(validate_experiment(r, Command::bench), ConfigError);

  ExperimentConfig reshaped = c;
  reshaped.problem.shapes = {{32, 2}};
  reshaped.optimizer.rank = 8;
  reshaped.optimizer.reshape = true;
  CHECK_NOTHROW(validate_experiment(reshaped, Command::bench));
  reshaped.optimizer.reshape = false;
  CHECK_THROWS_AS(validate_experiment(reshaped, Command::bench), ConfigError);

  ExperimentConfig batch = c;
  batch.problem.family = "logistic";
  batch.problem.shapes = {{4, 5}};
  batch.problem.samples = 32;
  batch.optimizer.batch_size = 33;
  CHECK_THROWS_AS(validate_experiment(batch, Command::bench), ConfigError);

  ExperimentConfig dense = c;
  dense.sweep.estimator_family = {EstimatorFamily::spsa_dense_subspace};
  dense.optimizer.dense_q = 36;
  CHECK_THROWS_AS(validate_experiment(dense, Command::bench), ConfigError);

  ExperimentConfig unknown = c;
  unknown.problem.family = "resnet";
  CHECK_THROWS_AS(validate_experiment(unknown, Command::bench), ConfigError);

  ExperimentConfig big = c;
  big.verification.shapes = {{15, 15}};
  CHECK_THROWS_AS(validate_experiment(big, Command::verify), ConfigError);

  ExperimentConfig est = c;
  CHECK_THROWS_AS(validate_experiment(est, Command::estimate), ConfigError);  // no families
  est.estimate.families = {{EstimatorFamily::exact_sgd, 1, 1}};
  CHECK_THROWS_AS(validate_experiment(est, Command::estimate), ConfigError);
  est.estimate.families = {{EstimatorFamily::spsa_dense_subspace, 1, 36}};
  CHECK_THROWS_AS(validate_experiment(est, Command::estimate), ConfigError);
  est.estimate.families = {{EstimatorFamily::spsa_dense_subspace, 1, 35}};
  CHECK_NOTHROW(validate_experiment(est, Command::estimate));
}

TEST_CASE("bench writes one CSV per cell plus a summary, reproducibly") {
  TempDir tmp;
  const ExperimentConfig c = small_bench();
  RunOptions o;
  o.out_dir = tmp.path / "first";
  o.workers = 3;
  std::ostringstream log;
  REQUIRE(run_bench(c, o, log) == 0);

  const auto runs = files_with_prefix(o.out_dir, "run_");
  const auto summaries = files_with_prefix(o.out_dir, "summary_");
  REQUIRE(runs.size() == 6);
  REQUIRE(summaries.size() == 1);
  const auto run0 = read_csv(runs[0]);
  CHECK(run0[0] == std::vector<std::string>{"run_id", "step", "loss_plus", "loss_minus", "rho", "lr", "wall_ms"});
  CHECK(run0.size() == 41);
  const auto summary = read_csv(summaries[0]);
  REQUIRE(summary.size() == 7);
  for (std::size_t i = 1; i < summary.size(); ++i) CHECK(summary[i][8] == "ok");

  RunOptions again = o;
  again.out_dir = tmp.path / "second";
  again.workers = 1;
  REQUIRE(run_bench(c, again, log) == 0);
  const auto runs2 = files_with_prefix(again.out_dir, "run_");
  REQUIRE(runs2.size() == runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    CHECK(runs[i].filename() == runs2[i].filename());
    CHECK(without_timing(read_csv(runs[i])) == without_timing(read_csv(runs2[i])));
  }
  CHECK(read_csv(summaries[0]) == read_csv(files_with_prefix(again.out_dir, "summary_")[0]));

  RunOptions shifted = o;
  shifted.out_dir = tmp.path / "shifted";
  shifted.seed_offset = 1;
  REQUIRE(run_bench(c, shifted, log) == 0);
  const auto runs3 = files_with_prefix(shifted.out_dir, "run_");
  CHECK(runs3[0].filename() != runs[0].filename());
  // Offset 1 moves seed 1 into the slot of seed 0.
  CHECK(without_timing(read_csv(runs3[0])).at(5).at(2) == without_timing(read_csv(runs[1])).at(5).at(2));
}

TEST_CASE("a diverging cell is recorded as failed and the others complete") {
  TempDir tmp;
  ExperimentConfig c = small_bench();
  c.sweep.estimator_family = {EstimatorFamily::exact_sgd};
  c.sweep.seeds = {0};
  c.sweep.learning_rate = {1e-2, 1e6};
  c.optimizer.step_budget = 200;
  RunOptions o;
  o.out_dir = tmp.path;
  std::ostringstream log;
  CHECK(run_bench(c, o, log) == 1);
  const auto summary = read_csv(files_with_prefix(tmp.path, "summary_")[0]);
  REQUIRE(summary.size() == 3);
  CHECK(summary[1][8] == "ok");
  CHECK(summary[2][8] == "failed");
  CHECK(!summary[2][12].empty());
  CHECK(log.str().find("cell 1 failed") != std::string::npos);
}

TEST_CASE("configuration errors exit with 2 and write nothing") {
  TempDir tmp;
  ExperimentConfig c = small_bench();
  c.optimizer.rank = 7;
  RunOptions o;
  o.out_dir = tmp.path;
  std::ostringstream log;
  CHECK(run_bench(c, o, log) == 2);
  CHECK(!fs::exists(tmp.path));
  CHECK(log.str().find("rank 7") != std::string::npos);

  ExperimentConfig e = small_bench();
  CHECK(run_estimate(e, o, log) == 2);
  CHECK(!fs::exists(tmp.path));
}

TEST_CASE("estimate writes diagnostics and uses a NaN sentinel for a single sample") {
  TempDir tmp;
  ExperimentConfig c;
  c.problem.shapes = {{10, 10}};
  c.problem.condition_number = 4.0;
  c.estimate.families = {{EstimatorFamily::subzero, 2, 0}, {EstimatorFamily::spsa_full, 0, 0}};
  c.estimate.samples = 5000;
  RunOptions o;
  o.out_dir = tmp.path / "nested" / "dir";
  std::ostringstream log;
  REQUIRE(run_estimate(c, o, log) == 0);
  auto rows = read_csv(files_with_prefix(o.out_dir, "diagnostics_")[0]);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"family", "q_or_d", "cosine", "rel_variance", "n_mc"});
  CHECK(rows[1][1] == "4");
  CHECK(rows[2][1] == "100");
  CHECK(std::stod(rows[1][3]) < std::stod(rows[2][3]));
  CHECK(std::stod(rows[1][2]) > std::stod(rows[2][2]));

  c.estimate.samples = 1;
  o.out_dir = tmp.path / "single";
  REQUIRE(run_estimate(c, o, log) == 0);
  rows = read_csv(files_with_prefix(o.out_dir, "diagnostics_")[0]);
  CHECK(rows[1][3] == "nan");
  CHECK(rows[1][4] == "1");
}

TEST_CASE("reduced verification battery passes and names every check") {
  TempDir tmp;
  ExperimentConfig c;
  c.verification.samples = 20'000;
  c.verification.second_moment_samples = 200'000;
  c.verification.convergence_runs = 8;
  c.verification.convergence_targets = {0.04, 0.01};
  c.verification.restoration_trials = 100;
  RunOptions o;
  o.out_dir = tmp.path;
  std::ostringstream log;
  CHECK(run_verify(c, o, log) == 0);
  const auto rows = read_csv(files_with_prefix(tmp.path, "verify_")[0]);
  CHECK(rows[0] == std::vector<std::string>{"check", "target", "estimate", "stderr", "pass"});
  CHECK(rows.size() == 21);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    INFO(rows[i][0]);
    CHECK(rows[i][4] == "true");
  }
}
