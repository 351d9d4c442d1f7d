#include "subzero/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include <json.hpp>

#include "subzero/errors.hpp"
#include "subzero/problems.hpp"
#include "subzero/random.hpp"
#include "subzero/verification.hpp"

namespace subzero::bench {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// JSON decoding with strict types

std::string_view alignment_name(NormAlignment a) {
  switch (a) {
    case NormAlignment::off: return "off";
    case NormAlignment::scale_z: return "scale_z";
    case NormAlignment::scale_hyper: return "scale_hyper";
  }
  return "off";
}

NormAlignment parse_alignment(std::string_view s) {
  if (s == "off") return NormAlignment::off;
  if (s == "scale_z") return NormAlignment::scale_z;
  if (s == "scale_hyper") return NormAlignment::scale_hyper;
  throw ConfigError("unknown norm alignment mode '" + std::string(s) + "'");
}

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

template <class T>
T decode(const json& v, const std::string& where) {
  auto fail = [&](const char* expected) -> ConfigError {
    return ConfigError(where + ": expected " + expected + ", got " + v.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw fail("a boolean");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_unsigned()) throw fail("a non-negative integer");
    return v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw fail("a number");
    return v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw fail("a string");
    return v.get<std::string>();
  } else if constexpr (std::is_same_v<T, Shape>) {
    if (!v.is_array() || v.size() != 2) throw fail("[rows, cols]");
    return Shape{decode<std::size_t>(v[0], where), decode<std::size_t>(v[1], where)};
  } else if constexpr (std::is_same_v<T, EstimatorFamily>) {
    if (!v.is_string()) throw fail("an estimator family name");
    return parse_estimator_family(v.get<std::string>());
  } else if constexpr (std::is_same_v<T, NormAlignment>) {
    if (!v.is_string()) throw fail("a norm alignment mode");
    return parse_alignment(v.get<std::string>());
  } else if constexpr (is_vector<T>::value) {
    if (!v.is_array()) throw fail("an array");
    T out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.push_back(decode<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
  } else {
    static_assert(sizeof(T) == 0, "no decoder");
  }
}

// Reads the keys of one object and rejects anything it did not ask for.
class Section {
 public:
  Section(const json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (auto it = obj_.find(key); it != obj_.end()) out = decode<T>(*it, name_ + "." + key);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& item : obj_.items()) {
      if (!seen_.contains(item.key())) throw ConfigError("unknown key '" + name_ + "." + item.key() + "'");
    }
  }

 private:
  const json& obj_;
  std::string name_;
  std::set<std::string> seen_;
};

json encode_shapes(const std::vector<Shape>& shapes) {
  json out = json::array();
  for (const auto& s : shapes) out.push_back({s.rows, s.cols});
  return out;
}

json encode_families(const std::vector<EstimatorFamily>& families) {
  json out = json::array();
  for (auto f : families) out.push_back(std::string(to_string(f)));
  return out;
}

void read_problem(const json& j, ProblemSpec& p) {
  Section s(j, "problem");
  s.read("family", p.family);
  s.read("shapes", p.shapes);
  s.read("widths", p.widths);
  s.read("condition_number", p.condition_number);
  s.read("samples", p.samples);
  s.read("l2", p.l2);
  s.read("noise", p.noise);
  s.read("seed", p.seed);
  s.read("diagonal", p.diagonal);
  s.read("linear_term", p.linear_term);
  s.read("centered_balanced", p.centered_balanced);
  s.finish();
}

void read_optimizer(const json& j, ExperimentConfig& c) {
  Section s(j, "optimizer");
  auto& o = c.optimizer;
  s.read("rank", o.rank);
  s.read("epsilon", o.epsilon);
  s.read("subspace_change_frequency", o.subspace_change_frequency);
  s.read("step_budget", o.step_budget);
  s.read("learning_rate", o.learning_rate.initial);
  std::string schedule = c.schedule_auto ? "auto" : "constant";
  s.read("schedule", schedule);
  if (schedule == "auto") {
    c.schedule_auto = true;
    o.learning_rate.kind = LearningRateSchedule::Kind::constant;
  } else if (schedule == "constant") {
    c.schedule_auto = false;
    o.learning_rate.kind = LearningRateSchedule::Kind::constant;
  } else if (schedule == "linear_decay") {
    c.schedule_auto = false;
    o.learning_rate.kind = LearningRateSchedule::Kind::linear_decay;
  } else {
    throw ConfigError("optimizer.schedule: expected auto, constant or linear_decay, got '" + schedule + "'");
  }
  s.read("estimator_family", o.estimator_family);
  s.read("batch_size", o.batch_size);
  s.read("master_seed", o.master_seed);
  s.read("norm_alignment_mode", o.norm_alignment_mode);
  s.read("reshape", o.reshape);
  s.read("dense_q", o.dense_q);
  s.read("dense_max_values", o.dense_max_values);
  s.read("eval_interval", o.eval_interval);
  s.finish();
}

void read_sweep(const json& j, SweepSpec& w) {
  Section s(j, "sweep");
  s.read("estimator_family", w.estimator_family);
  s.read("rank", w.rank);
  s.read("subspace_change_frequency", w.subspace_change_frequency);
  s.read("epsilon", w.epsilon);
  s.read("learning_rate", w.learning_rate);
  s.read("seeds", w.seeds);
  s.finish();
}

void read_verification(const json& j, VerifySpec& v) {
  Section s(j, "verification");
  s.read("shapes", v.shapes);
  s.read("rank", v.rank);
  s.read("condition_number", v.condition_number);
  s.read("samples", v.samples);
  s.read("second_moment_samples", v.second_moment_samples);
  s.read("bias_epsilons", v.bias_epsilons);
  s.read("convergence_runs", v.convergence_runs);
  s.read("convergence_targets", v.convergence_targets);
  s.read("restoration_trials", v.restoration_trials);
  s.read("seed", v.seed);
  s.finish();
}

void read_estimate(const json& j, EstimateSpec& e) {
  Section s(j, "estimate");
  if (const json* families = s.child("families")) {
    if (!families->is_array()) throw ConfigError("estimate.families: expected an array");
    e.families.clear();
    for (std::size_t i = 0; i < families->size(); ++i) {
      Section f((*families)[i], "estimate.families[" + std::to_string(i) + "]");
      EstimateFamily entry;
      f.read("family", entry.family);
      f.read("rank", entry.rank);
      f.read("q", entry.q);
      f.finish();
      e.families.push_back(entry);
    }
  }
  s.read("samples", e.samples);
  s.read("point_seed", e.point_seed);
  s.finish();
}

json encode(const ExperimentConfig& c) {
  const auto& p = c.problem;
  const auto& o = c.optimizer;
  const char* schedule = c.schedule_auto ? "auto"
                         : o.learning_rate.kind == LearningRateSchedule::Kind::linear_decay ? "linear_decay"
                                                                                            : "constant";
  json families = json::array();
  for (const auto& f : c.estimate.families) {
    families.push_back({{"family", std::string(to_string(f.family))}, {"rank", f.rank}, {"q", f.q}});
  }
  return {
      {"problem",
       {{"family", p.family},
        {"shapes", encode_shapes(p.shapes)},
        {"widths", p.widths},
        {"condition_number", p.condition_number},
        {"samples", p.samples},
        {"l2", p.l2},
        {"noise", p.noise},
        {"seed", p.seed},
        {"diagonal", p.diagonal},
        {"linear_term", p.linear_term},
        {"centered_balanced", p.centered_balanced}}},
      {"optimizer",
       {{"rank", o.rank},
        {"epsilon", o.epsilon},
        {"subspace_change_frequency", o.subspace_change_frequency},
        {"step_budget", o.step_budget},
        {"learning_rate", o.learning_rate.initial},
        {"schedule", schedule},
        {"estimator_family", std::string(to_string(o.estimator_family))},
        {"batch_size", o.batch_size},
        {"master_seed", o.master_seed},
        {"norm_alignment_mode", std::string(alignment_name(o.norm_alignment_mode))},
        {"reshape", o.reshape},
        {"dense_q", o.dense_q},
        {"dense_max_values", o.dense_max_values},
        {"eval_interval", o.eval_interval}}},
      {"sweep",
       {{"estimator_family", encode_families(c.sweep.estimator_family)},
        {"rank", c.sweep.rank},
        {"subspace_change_frequency", c.sweep.subspace_change_frequency},
        {"epsilon", c.sweep.epsilon},
        {"learning_rate", c.sweep.learning_rate},
        {"seeds", c.sweep.seeds}}},
      {"verification",
       {{"shapes", encode_shapes(c.verification.shapes)},
        {"rank", c.verification.rank},
        {"condition_number", c.verification.condition_number},
        {"samples", c.verification.samples},
        {"second_moment_samples", c.verification.second_moment_samples},
        {"bias_epsilons", c.verification.bias_epsilons},
        {"convergence_runs", c.verification.convergence_runs},
        {"convergence_targets", c.verification.convergence_targets},
        {"restoration_trials", c.verification.restoration_trials},
        {"seed", c.verification.seed}}},
      {"estimate", {{"families", families}, {"samples", c.estimate.samples}, {"point_seed", c.estimate.point_seed}}},
      {"output_dir", c.output_dir},
      {"smoothing_window", c.smoothing_window},
  };
}

// ---------------------------------------------------------------------------
// Validation helpers

// Rank must fit every matrix layer's working shape; vector layers are exempt.
void check_rank(std::span<const Shape> shapes, std::size_t rank, bool reshape, const std::string& where) {
  if (rank == 0) throw ConfigError(where + ": rank must be at least 1");
  for (const auto& s : shapes) {
    if (s.rows == 0 || s.cols == 0) throw ConfigError(where + ": layer with a zero dimension");
    if (std::min(s.rows, s.cols) == 1) continue;
    const LayerShape ls = reshape ? reshape_near_square(s.rows, s.cols) : LayerShape{s.rows, s.cols, s.rows, s.cols};
    const std::size_t limit = std::min(ls.reshaped_m, ls.reshaped_n);
    if (rank > limit) {
      throw ConfigError(where + ": rank " + std::to_string(rank) + " exceeds min(" + std::to_string(ls.reshaped_m) +
                        ", " + std::to_string(ls.reshaped_n) + ") = " + std::to_string(limit));
    }
  }
}

std::unique_ptr<Problem> checked_problem(const ProblemSpec& spec) {
  try {
    return make_problem(spec);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("problem: ") + e.what());
  }
}

void check_cell(const OptimizerConfig& config, const Problem& problem, const std::string& where) {
  try {
    validate(config);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  const auto shapes = problem.shapes();
  const std::size_t d = total_size(shapes);
  switch (config.estimator_family) {
    case EstimatorFamily::subzero:
      check_rank(shapes, config.rank, config.reshape, where);
      break;
    case EstimatorFamily::spsa_dense_subspace:
      if (config.dense_q == 0 || config.dense_q > d) {
        throw ConfigError(where + ": dense_q must be in [1, " + std::to_string(d) + "]");
      }
      if (dense_projection_values(d, config.dense_q) > config.dense_max_values) {
        throw ConfigError(where + ": dense projection of " + std::to_string(d) + " x " +
                          std::to_string(config.dense_q) + " exceeds dense_max_values");
      }
      break;
    default:
      break;
  }
  if (config.batch_size > problem.dataset_size()) {
    throw ConfigError(where + ": batch_size " + std::to_string(config.batch_size) + " exceeds the dataset size " +
                      std::to_string(problem.dataset_size()));
  }
}

// ---------------------------------------------------------------------------
// CSV helpers

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::size_t resolve_workers(std::size_t workers) {
  if (workers > 0) return workers;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::filesystem::path prepare_out_dir(const ExperimentConfig& config) {
  const std::filesystem::path dir = config.output_dir.empty() ? "." : config.output_dir;
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Verification battery

Subspace rank_subspace(const std::vector<Shape>& shapes, std::size_t rank, std::uint64_t seed) {
  PlanOptions opts;
  opts.rank = rank;
  return generate_subspace(plan_layers(shapes, opts), seed);
}

QuadraticProblem quadratic(const std::vector<Shape>& shapes, double kappa, std::uint64_t seed) {
  QuadraticProblem::Options opts;
  opts.shapes = shapes;
  opts.condition_number = kappa;
  opts.seed = seed;
  return QuadraticProblem(opts);
}

VerificationRow from_report(std::string name, const MonteCarloReport& r) {
  return {std::move(name), r.target, r.estimate, r.standard_error, r.pass};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(j, "config");
  if (const json* v = top.child("problem")) read_problem(*v, c.problem);
  if (const json* v = top.child("optimizer")) read_optimizer(*v, c);
  if (const json* v = top.child("sweep")) read_sweep(*v, c.sweep);
  if (const json* v = top.child("verification")) read_verification(*v, c.verification);
  if (const json* v = top.child("estimate")) read_estimate(*v, c.estimate);
  top.read("output_dir", c.output_dir);
  top.read("smoothing_window", c.smoothing_window);
  top.finish();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& config) { return encode(config).dump(2); }

std::string config_hash(const ExperimentConfig& config) {
  json j = encode(config);
  j.erase("output_dir");
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return hex16(h);
}

std::unique_ptr<Problem> make_problem(const ProblemSpec& spec) {
  if (spec.family == "quadratic") {
    QuadraticProblem::Options o;
    o.shapes = spec.shapes;
    o.condition_number = spec.condition_number;
    o.seed = spec.seed;
    o.diagonal = spec.diagonal;
    o.linear_term = spec.linear_term;
    return std::make_unique<QuadraticProblem>(o);
  }
  if (spec.family == "logistic") {
    if (spec.shapes.size() != 1) throw ConfigError("logistic problems take exactly one weight shape");
    LogisticProblem::Options o;
    o.weight_shape = spec.shapes[0];
    o.samples = spec.samples;
    o.l2 = spec.l2;
    o.seed = spec.seed;
    o.centered_balanced = spec.centered_balanced;
    return std::make_unique<LogisticProblem>(o);
  }
  if (spec.family == "mlp") {
    MlpProblem::Options o;
    o.widths = spec.widths;
    o.samples = spec.samples;
    o.seed = spec.seed;
    o.noise = spec.noise;
    return std::make_unique<MlpProblem>(o);
  }
  if (spec.family == "quartic") {
    if (spec.shapes.empty()) throw ConfigError("quartic problems need at least one shape");
    return std::make_unique<QuarticProblem>(spec.shapes);
  }
  throw ConfigError("unknown problem family '" + spec.family + "'");
}

std::vector<SweepCell> expand_sweep(const ExperimentConfig& config) {
  const auto& base = config.optimizer;
  const auto& s = config.sweep;
  auto axis = [](const auto& values, auto fallback) {
    using T = decltype(fallback);
    return values.empty() ? std::vector<T>{fallback} : std::vector<T>(values.begin(), values.end());
  };
  const auto families = axis(s.estimator_family, base.estimator_family);
  const auto ranks = axis(s.rank, base.rank);
  const auto freqs = axis(s.subspace_change_frequency, base.subspace_change_frequency);
  const auto epsilons = axis(s.epsilon, base.epsilon);
  const auto rates = axis(s.learning_rate, base.learning_rate.initial);
  const auto seeds = axis(s.seeds, base.master_seed);

  std::vector<SweepCell> cells;
  for (auto f : families)
    for (auto r : ranks)
      for (auto t0 : freqs)
        for (auto eps : epsilons)
          for (auto eta : rates)
            for (auto seed : seeds) {
              SweepCell cell;
              cell.index = cells.size();
              cell.config = base;
              cell.config.estimator_family = f;
              cell.config.rank = r;
              cell.config.subspace_change_frequency = t0;
              cell.config.epsilon = eps;
              cell.config.learning_rate.initial = eta;
              cell.config.master_seed = seed;
              if (config.schedule_auto) cell.config.learning_rate.kind = default_schedule(f);
              cells.push_back(cell);
            }
  return cells;
}

void validate_experiment(const ExperimentConfig& config, Command command) {
  if (config.smoothing_window == 0) throw ConfigError("smoothing_window must be at least 1");
  switch (command) {
    case Command::bench: {
      const auto problem = checked_problem(config.problem);
      for (const auto& cell : expand_sweep(config)) {
        check_cell(cell.config, *problem, "sweep cell " + std::to_string(cell.index));
      }
      break;
    }
    case Command::verify: {
      const auto& v = config.verification;
      if (v.shapes.empty()) throw ConfigError("verification.shapes must not be empty");
      const std::size_t d = total_size(v.shapes);
      if (d > kToyScaleLimit) {
        throw ConfigError("verification shapes have d = " + std::to_string(d) + ", above the explicit-projector limit " +
                          std::to_string(kToyScaleLimit));
      }
      check_rank(v.shapes, v.rank, false, "verification");
      if (!(v.condition_number >= 1.0)) throw ConfigError("verification.condition_number must be >= 1");
      if (v.samples < 2 || v.second_moment_samples < 2) throw ConfigError("verification sample counts must be >= 2");
      if (v.bias_epsilons.size() < 2) throw ConfigError("verification.bias_epsilons needs at least two values");
      for (double e : v.bias_epsilons) {
        if (!(e > 0.0) || !std::isfinite(e)) throw ConfigError("verification.bias_epsilons must be positive");
      }
      if (v.convergence_runs == 0) throw ConfigError("verification.convergence_runs must be at least 1");
      if (v.convergence_targets.empty()) throw ConfigError("verification.convergence_targets must not be empty");
      for (double t : v.convergence_targets) {
        if (!(t > 0.0 && t < 1.0)) throw ConfigError("verification.convergence_targets must lie in (0, 1)");
      }
      if (v.restoration_trials == 0) throw ConfigError("verification.restoration_trials must be at least 1");
      break;
    }
    case Command::estimate: {
      const auto& e = config.estimate;
      if (e.families.empty()) throw ConfigError("estimate.families must not be empty");
      if (e.samples == 0) throw ConfigError("estimate.samples must be at least 1");
      if (!(config.optimizer.epsilon > 0.0)) throw ConfigError("optimizer.epsilon must be positive");
      const auto problem = checked_problem(config.problem);
      const auto shapes = problem->shapes();
      const std::size_t d = total_size(shapes);
      for (std::size_t i = 0; i < e.families.size(); ++i) {
        const auto& f = e.families[i];
        const std::string where = "estimate.families[" + std::to_string(i) + "]";
        switch (f.family) {
          case EstimatorFamily::subzero:
            check_rank(shapes, f.rank, config.optimizer.reshape, where);
            break;
          case EstimatorFamily::spsa_dense_subspace:
            if (f.q == 0 || f.q > d) throw ConfigError(where + ": q must be in [1, " + std::to_string(d) + "]");
            break;
          case EstimatorFamily::spsa_full:
            break;
          case EstimatorFamily::exact_sgd:
            throw ConfigError(where + ": exact_sgd is not a zeroth-order estimator");
        }
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// CSV

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : out_(std::make_unique<std::ofstream>(path)), columns_(header.size()) {
  if (!*out_) throw Error("cannot open " + path.string() + " for writing");
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) throw Error("CSV row has the wrong number of fields");
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) *out_ << ',';
    *out_ << csv_field(fields[i]);
  }
  *out_ << '\n';
  if (!*out_) throw Error("CSV write failed");
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  char ch;
  while (in.get(ch)) {
    any = true;
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get(ch);
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Commands

ExperimentConfig apply_options(ExperimentConfig config, const RunOptions& options) {
  if (!options.out_dir.empty()) config.output_dir = options.out_dir.string();
  const std::uint64_t k = options.seed_offset;
  if (k != 0) {
    config.optimizer.master_seed += k;
    for (auto& s : config.sweep.seeds) s += k;
    config.verification.seed += k;
    config.estimate.point_seed += k;
  }
  return config;
}

std::vector<VerificationRow> verification_battery(const VerifySpec& spec, std::size_t workers) {
  std::vector<VerificationRow> rows;
  auto seed = [&](std::uint64_t tag) { return derive_seed(spec.seed, {tag}); };
  auto mc = [&](std::size_t samples, std::uint64_t tag) {
    McOptions o;
    o.samples = samples;
    o.seed = seed(tag);
    o.workers = workers;
    return o;
  };

  const auto problem = quadratic(spec.shapes, spec.condition_number, seed(1));
  const Subspace sub = rank_subspace(spec.shapes, spec.rank, seed(2));
  const ParamSet x = problem.initial_params(seed(3));

  // Explicit projector structure.
  const auto proj = materialize_projector(sub);
  rows.push_back({"projector_orthonormality", 0.0, proj.orthonormality_error, 0.0, proj.orthonormality_error <= 1e-10});
  {
    const Matrix ppt = matmul_nt(proj.p, proj.p);
    const double idem = max_abs_diff(matmul(ppt, ppt), ppt);
    rows.push_back({"projector_idempotence", 0.0, idem, 0.0, idem <= 1e-10});
  }
  {
    double worst = 0.0;
    for (std::uint64_t k = 0; k < 20; ++k) {
      const std::uint64_t s = derive_seed(seed(4), {k});
      const auto z = draw_stacked_z(sub, s);
      const auto stacked = stack_layers(replay_perturbation(sub, s, 1.0), sub);
      for (std::size_t i = 0; i < proj.d; ++i) worst = std::max(worst, std::abs(stacked[i] - dot(proj.p.row(i), z)));
    }
    rows.push_back({"stacked_perturbation", 0.0, worst, 0.0, worst <= 1e-10});
  }
  {
    // Each matrix layer's step is U Z Vᵀ: zero outside span(U) on the left and span(V) on the right.
    const ParamSet dir = replay_perturbation(sub, seed(5), 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < sub.size(); ++i) {
      if (sub[i].plan.full_space) continue;
      const auto& pair = *sub[i].pair;
      const Matrix& delta = dir[i];
      const double scale = std::max(max_abs(delta), 1e-300);
      worst = std::max(worst, max_abs(delta - matmul(pair.u, matmul_tn(pair.u, delta))) / scale);
      worst = std::max(worst, max_abs(delta - matmul_nt(matmul(delta, pair.v), pair.v)) / scale);
    }
    rows.push_back({"layerwise_factorization", 0.0, worst, 0.0, worst <= 1e-10});
  }

  // Quadratic identities.
  rows.push_back(from_report("expectation_identity", check_expectation_identity(problem, sub, x, mc(spec.samples, 6))));
  rows.push_back(
      from_report("second_moment", check_second_moment(problem, sub, x, mc(spec.second_moment_samples, 7))));
  const Subspace full = full_space_subspace(spec.shapes);
  const auto full_moment = check_second_moment(problem, full, x, mc(spec.samples, 8));
  rows.push_back(from_report("second_moment_full_space", full_moment));
  {
    const auto low = check_second_moment(problem, sub, x, mc(spec.samples, 9));
    rows.push_back({"variance_contrast", full_moment.target, low.target, 0.0, low.target <= full_moment.target});
  }

  struct CosineCase {
    const char* name;
    Shape shape;
    std::size_t rank;
  };
  const CosineCase cosine_cases[] = {
      {"cosine_identity_q1", {3, 3}, 1}, {"cosine_identity_q4", {4, 4}, 2}, {"cosine_identity_q16", {8, 8}, 4}};
  std::uint64_t tag = 10;
  for (const auto& c : cosine_cases) {
    const std::vector<Shape> shapes{c.shape};
    const auto qp = quadratic(shapes, spec.condition_number, seed(tag));
    const Subspace cs = rank_subspace(shapes, c.rank, seed(tag + 1));
    double spread = 0.0;
    auto r = check_cosine_identity(qp, cs, qp.initial_params(seed(tag + 2)), mc(spec.samples, tag + 3), 1e-3, &spread);
    bool ok = r.pass && r.relative_deviation < 0.05;
    if (c.rank == 1) ok = ok && spread < 1e-12;
    rows.push_back({c.name, r.target, r.estimate, r.standard_error, ok});
    tag += 4;
  }

  // Bias on the quartic x⁴ at x = 1, probe interval |x| <= 1.5.
  {
    const QuarticProblem quartic({{1, 1}});
    const Subspace qs = full_space_subspace(quartic.shapes());
    const auto slope = check_bias_slope(quartic, qs, ParamSet{Matrix{{1.0}}}, spec.bias_epsilons,
                                        QuarticProblem::hessian_lipschitz(1.5), mc(spec.samples, 30));
    for (const auto& p : slope.points) {
      char name[48];
      std::snprintf(name, sizeof name, "bias_bound_eps_%g", p.epsilon);
      rows.push_back({name, p.bound, p.report.estimate,
                      p.report.standard_error, p.report.pass});
    }
    rows.push_back({"bias_slope", 2.0, slope.slope, 0.0, slope.pass});
  }

  // Convergence with a fixed subspace, q = 4, 8, 16.
  {
    std::vector<ConvergenceCase> cases;
    for (std::size_t layers : {1u, 2u, 4u}) cases.push_back(make_convergence_case(layers, 6, 2, 2.0, seed(40 + layers)));
    ConvergenceSettings settings;
    settings.targets = spec.convergence_targets;
    settings.runs = spec.convergence_runs;
    settings.seed = seed(50);
    const auto r = check_convergence_rate(cases, settings);
    rows.push_back({"convergence_slope", 1.0, r.slope, 0.0, r.pass});
    for (std::size_t i = 1; i < r.runs.size(); ++i) {
      const double ratio = static_cast<double>(r.runs[i].hitting_times.back()) /
                           static_cast<double>(r.runs[i - 1].hitting_times.back());
      // η ∝ 1/(q+4), so hitting times grow like (q+4).
      const double expected = static_cast<double>(r.runs[i].q + 4) / static_cast<double>(r.runs[i - 1].q + 4);
      rows.push_back({"convergence_ratio_q" + std::to_string(r.runs[i].q), expected, ratio, 0.0,
                      std::abs(ratio / expected - 1.0) <= 0.25});
    }
  }

  // Seed-replay restoration.
  {
    const std::vector<Shape> shapes{{8, 6}, {6, 1}, {5, 7}};
    double worst = 0.0;
    for (std::uint64_t k = 0; k < spec.restoration_trials; ++k) {
      const Subspace rs = rank_subspace(shapes, 1 + k % 4, derive_seed(seed(60), {k}));
      GaussianStream g(derive_seed(seed(61), {k}));
      ParamSet w;
      for (const auto& sh : shapes) w.push_back(gaussian_matrix(g, sh.rows, sh.cols));
      const ParamSet original = w;
      const double eps = 1e-2 * GaussianStream::uniform_at(seed(62), k);
      const std::uint64_t s = derive_seed(seed(63), {k});
      perturb_params_inplace(w, rs, {eps, s, 1.0});
      perturb_params_inplace(w, rs, {eps, s, -2.0});
      perturb_params_inplace(w, rs, {eps, s, 1.0});
      for (std::size_t i = 0; i < w.size(); ++i) worst = std::max(worst, max_abs_diff(w[i], original[i]));
    }
    rows.push_back({"restoration", 0.0, worst, 0.0, worst <= 1e-12});
  }

  // Relative variance of the layer-wise estimator vs full-space SPSA.
  {
    const std::vector<Shape> shapes{{10, 10}};
    const auto qp = quadratic(shapes, spec.condition_number, seed(70));
    const ParamSet x0 = qp.initial_params(seed(71));
    EstimatorSpec low;
    low.family = EstimatorFamily::subzero;
    low.subspace = rank_subspace(shapes, 2, seed(72));
    EstimatorSpec plain;
    plain.family = EstimatorFamily::spsa_full;
    const auto a = estimator_diagnostics(qp, x0, low, mc(spec.samples, 73));
    const auto b = estimator_diagnostics(qp, x0, plain, mc(spec.samples, 74));
    rows.push_back({"variance_ordering", b.rel_variance, a.rel_variance, 0.0,
                    a.rel_variance < b.rel_variance && a.cosine > b.cosine});
  }
  return rows;
}

std::vector<double> smoothed_losses(const std::vector<StepRecord>& steps, std::size_t window) {
  window = std::max<std::size_t>(window, 1);
  std::vector<double> out;
  out.reserve(steps.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    sum += 0.5 * (steps[i].loss_plus + steps[i].loss_minus);
    if (i >= window) sum -= 0.5 * (steps[i - window].loss_plus + steps[i - window].loss_minus);
    out.push_back(sum / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

std::string run_file_name(const std::string& hash, std::size_t cell) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", cell);
  return "run_" + hash + "_" + buf + ".csv";
}

namespace {

// Wraps a command body: ConfigError -> 2, other failures -> 1.
template <class Body>
int guarded(std::ostream& log, Body body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int run_verify(const ExperimentConfig& input, const RunOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig config = apply_options(input, options);
    validate_experiment(config, Command::verify);
    const auto dir = prepare_out_dir(config);
    const std::string hash = config_hash(config);
    const auto rows = verification_battery(config.verification, options.workers);

    const auto path = dir / ("verify_" + hash + ".csv");
    CsvWriter csv(path, {"check", "target", "estimate", "stderr", "pass"});
    int failed = 0;
    for (const auto& r : rows) {
      csv.row({r.check, format_double(r.target), format_double(r.estimate), format_double(r.standard_error),
               r.pass ? "true" : "false"});
      if (!r.pass) {
        log << "check failed: " << r.check << " (estimate " << format_double(r.estimate) << ", target "
            << format_double(r.target) << ")\n";
        ++failed;
      }
    }
    log << rows.size() - failed << "/" << rows.size() << " checks passed; wrote " << path.string() << '\n';
    return failed == 0 ? 0 : 1;
  });
}

int run_bench(const ExperimentConfig& input, const RunOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig config = apply_options(input, options);
    validate_experiment(config, Command::bench);
    const auto dir = prepare_out_dir(config);
    const std::string hash = config_hash(config);
    const auto problem = make_problem(config.problem);
    const auto cells = expand_sweep(config);

    std::vector<CellSummary> summaries(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) {
        const auto& cell = cells[i];
        CellSummary& s = summaries[i];
        s.index = cell.index;
        s.run_id = hash + "-" + std::to_string(cell.index);
        try {
          const RunRecord record = train(*problem, cell.config);
          CsvWriter csv(dir / run_file_name(hash, cell.index),
                        {"run_id", "step", "loss_plus", "loss_minus", "rho", "lr", "wall_ms"});
          for (const auto& st : record.steps) {
            csv.row({s.run_id, std::to_string(st.step), format_double(st.loss_plus), format_double(st.loss_minus),
                     format_double(st.rho), format_double(st.lr), format_double(st.wall_ms)});
          }
          const auto smooth = smoothed_losses(record.steps, config.smoothing_window);
          const double nan = std::nan("");
          s.final_smoothed = smooth.empty() ? nan : smooth.back();
          s.best_smoothed = smooth.empty() ? nan : *std::min_element(smooth.begin(), smooth.end());
          s.final_validation = record.validation.empty() ? nan : record.validation.back().loss;
          s.ok = true;
        } catch (const std::exception& e) {
          s.ok = false;
          s.error = e.what();
          s.final_smoothed = s.best_smoothed = s.final_validation = std::nan("");
        }
      }
    };
    const std::size_t n_threads = std::min(resolve_workers(options.workers), std::max<std::size_t>(cells.size(), 1));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    CsvWriter summary(dir / ("summary_" + hash + ".csv"),
                      {"cell", "run_id", "estimator_family", "rank", "subspace_change_frequency", "epsilon",
                       "learning_rate", "seed", "status", "final_smoothed_loss", "best_smoothed_loss",
                       "final_validation_loss", "error"});
    int failed = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto& c = cells[i].config;
      const auto& s = summaries[i];
      summary.row({std::to_string(s.index), s.run_id, std::string(to_string(c.estimator_family)),
                   std::to_string(c.rank), std::to_string(c.subspace_change_frequency), format_double(c.epsilon),
                   format_double(c.learning_rate.initial), std::to_string(c.master_seed), s.ok ? "ok" : "failed",
                   format_double(s.final_smoothed), format_double(s.best_smoothed),
                   format_double(s.final_validation), s.error});
      if (!s.ok) {
        log << "cell " << s.index << " failed: " << s.error << '\n';
        ++failed;
      }
    }
    log << cells.size() - failed << "/" << cells.size() << " cells completed; wrote " << dir.string() << "/summary_"
        << hash << ".csv\n";
    return failed == 0 ? 0 : 1;
  });
}

int run_estimate(const ExperimentConfig& input, const RunOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const ExperimentConfig config = apply_options(input, options);
    validate_experiment(config, Command::estimate);
    const auto dir = prepare_out_dir(config);
    const std::string hash = config_hash(config);
    const auto problem = make_problem(config.problem);
    const auto shapes = problem->shapes();
    const ParamSet x = problem->initial_params(config.estimate.point_seed);

    const auto path = dir / ("diagnostics_" + hash + ".csv");
    CsvWriter csv(path, {"family", "q_or_d", "cosine", "rel_variance", "n_mc"});
    for (std::size_t i = 0; i < config.estimate.families.size(); ++i) {
      const auto& f = config.estimate.families[i];
      EstimatorSpec spec;
      spec.family = f.family;
      spec.epsilon = config.optimizer.epsilon;
      spec.q = f.q;
      if (f.family == EstimatorFamily::subzero) {
        PlanOptions opts;
        opts.rank = f.rank;
        opts.reshape = config.optimizer.reshape;
        spec.subspace = generate_subspace(plan_layers(shapes, opts), derive_seed(config.estimate.point_seed, {1, i}));
      }
      McOptions mc;
      mc.samples = config.estimate.samples;
      mc.seed = derive_seed(config.estimate.point_seed, {2, i});
      mc.workers = options.workers;
      const auto d = estimator_diagnostics(*problem, x, spec, mc);
      csv.row({std::string(to_string(f.family)), std::to_string(d.q_or_d), format_double(d.cosine),
               format_double(d.rel_variance), std::to_string(d.samples)});
    }
    log << "wrote " << path.string() << '\n';
    return 0;
  });
}

}  // namespace subzero::bench
