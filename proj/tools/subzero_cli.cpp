#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "subzero/bench.hpp"
#include "subzero/errors.hpp"

namespace sb = subzero::bench;

int main(int argc, char** argv) {
  CLI::App app{"Layer-wise low-rank zeroth-order optimization: verification, sweeps and estimator diagnostics"};
  app.require_subcommand(1);

  std::string config_path;
  sb::RunOptions options;
  std::string out_dir;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory (overrides output_dir)");
    sub->add_option("--workers", options.workers, "Worker threads (0: all cores)");
    sub->add_option("--seed-offset", options.seed_offset, "Added to every seed in the config");
  };
  auto* verify = app.add_subcommand("verify", "Run the identity and scaling checks");
  auto* bench = app.add_subcommand("bench", "Run a training sweep");
  auto* estimate = app.add_subcommand("estimate", "Measure estimator cosine and relative variance");
  for (auto* sub : {verify, bench, estimate}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  sb::ExperimentConfig config;
  try {
    config = sb::load_config(config_path);
  } catch (const subzero::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  }
  options.out_dir = out_dir;

  if (*verify) return sb::run_verify(config, options, std::cerr);
  if (*bench) return sb::run_bench(config, options, std::cerr);
  return sb::run_estimate(config, options, std::cerr);
}
