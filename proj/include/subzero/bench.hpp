#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "subzero/optimizer.hpp"
#include "subzero/problem.hpp"

namespace subzero::bench {

/// Which synthetic loss to build and how.
struct ProblemSpec {
  std::string family = "quadratic";  // quadratic | logistic | mlp | quartic
  /// Layer shapes (quadratic, quartic); the first entry is the weight shape for logistic.
  std::vector<Shape> shapes{{8, 8}};
  std::vector<std::size_t> widths{8, 16, 16, 1};  // mlp
  double condition_number = 10.0;
  std::size_t samples = 512;
  double l2 = 1e-3;
  double noise = 0.0;
  std::uint64_t seed = 0;
  bool diagonal = false;
  bool linear_term = false;
  bool centered_balanced = false;
  friend bool operator==(const ProblemSpec&, const ProblemSpec&) = default;
};

/// Sweep axes; an empty axis keeps the base optimizer value.
struct SweepSpec {
  std::vector<EstimatorFamily> estimator_family;
  std::vector<std::size_t> rank;
  std::vector<std::size_t> subspace_change_frequency;
  std::vector<double> epsilon;
  std::vector<double> learning_rate;
  std::vector<std::uint64_t> seeds;
  friend bool operator==(const SweepSpec&, const SweepSpec&) = default;
};

struct VerifySpec {
  std::vector<Shape> shapes{{2, 3}, {3, 2}};
  std::size_t rank = 1;
  double condition_number = 4.0;
  std::size_t samples = 100'000;
  std::size_t second_moment_samples = 1'000'000;
  std::vector<double> bias_epsilons{1e-1, 1e-2, 1e-3};
  std::size_t convergence_runs = 32;
  std::vector<double> convergence_targets{0.04, 0.01, 0.0025};
  std::size_t restoration_trials = 1000;
  std::uint64_t seed = 0;
  friend bool operator==(const VerifySpec&, const VerifySpec&) = default;
};

struct EstimateFamily {
  EstimatorFamily family = EstimatorFamily::subzero;
  std::size_t rank = 2;  // subzero
  std::size_t q = 8;     // spsa_dense_subspace
  friend bool operator==(const EstimateFamily&, const EstimateFamily&) = default;
};

struct EstimateSpec {
  std::vector<EstimateFamily> families;
  std::size_t samples = 10'000;
  std::uint64_t point_seed = 0;
  friend bool operator==(const EstimateSpec&, const EstimateSpec&) = default;
};

struct ExperimentConfig {
  ProblemSpec problem;
  OptimizerConfig optimizer;
  /// When set, each cell uses its family's default schedule kind.
  bool schedule_auto = true;
  SweepSpec sweep;
  VerifySpec verification;
  EstimateSpec estimate;
  std::string output_dir = "out";
  std::size_t smoothing_window = 50;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// JSON text to config; missing keys take defaults, unknown keys and type
/// mismatches throw ConfigError.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const ExperimentConfig& config);

/// FNV-1a of the compact serialization without output_dir, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

std::unique_ptr<Problem> make_problem(const ProblemSpec& spec);

struct SweepCell {
  std::size_t index = 0;
  OptimizerConfig config;
};

/// Cartesian product in the order family, rank, T₀, ε, η, seed (last varies fastest).
std::vector<SweepCell> expand_sweep(const ExperimentConfig& config);

enum class Command { verify, bench, estimate };

/// Every precondition the command depends on; throws ConfigError before any run.
void validate_experiment(const ExperimentConfig& config, Command command);

// ---------------------------------------------------------------------------
// CSV

/// 17 significant digits, so values parse back bit-exactly.
std::string format_double(double value);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);

 private:
  std::unique_ptr<std::ostream> out_;
  std::size_t columns_;
};

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Commands

struct RunOptions {
  std::filesystem::path out_dir;  // empty: use config.output_dir
  std::size_t workers = 0;        // 0: hardware concurrency
  std::uint64_t seed_offset = 0;
};

/// Applies --out and --seed-offset to the config (before hashing).
ExperimentConfig apply_options(ExperimentConfig config, const RunOptions& options);

struct VerificationRow {
  std::string check;
  double target = 0.0;
  double estimate = 0.0;
  double standard_error = 0.0;
  bool pass = false;
};

std::vector<VerificationRow> verification_battery(const VerifySpec& spec, std::size_t workers);

/// Trailing mean of (loss_plus + loss_minus) / 2 over `window` steps.
std::vector<double> smoothed_losses(const std::vector<StepRecord>& steps, std::size_t window);

struct CellSummary {
  std::size_t index = 0;
  std::string run_id;
  bool ok = false;
  double final_smoothed = 0.0;
  double best_smoothed = 0.0;
  double final_validation = 0.0;
  std::string error;
};

std::string run_file_name(const std::string& hash, std::size_t cell);

/// Exit codes: 0 success, 1 check or cell failure, 2 configuration error.
int run_verify(const ExperimentConfig& config, const RunOptions& options, std::ostream& log);
int run_bench(const ExperimentConfig& config, const RunOptions& options, std::ostream& log);
int run_estimate(const ExperimentConfig& config, const RunOptions& options, std::ostream& log);

}  // namespace subzero::bench
