#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "cdmisfa/agent.hpp"

namespace cdmisfa {

enum class Scenario { Stationary, NonstationarySweep, StabilityCompare, PixelSurrogate };

std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& name);

/// Invalid configuration. `field()` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ConfigNotFound : public std::runtime_error {
 public:
  explicit ConfigNotFound(const std::string& path) : std::runtime_error("config not found: " + path) {}
};

/// Values swept by `sweep`. Empty lists hold the config's own value.
struct SweepGrid {
  std::vector<double> epsilon_c;
  std::vector<double> sigma;
  std::vector<double> nu;
  std::vector<int> tau;

  bool empty() const { return epsilon_c.empty() && sigma.empty() && nu.empty() && tau.empty(); }
  friend bool operator==(const SweepGrid&, const SweepGrid&) = default;
};

/// "sigma=0,0.0001;tau=30,50" or a JSON object of lists.
SweepGrid parse_grid(const std::string& text);
nlohmann::json to_json(const SweepGrid& g);

struct ExperimentConfig {
  Scenario scenario = Scenario::Stationary;
  AgentConfig agent;
  bool beta_auto = true;  // beta = nu log 2 / (2 (n - 1)), recomputed per sweep point
  int trials = 20;
  std::uint64_t seed = 1000;
  int jobs = 1;
  std::string output_dir = "out";
  bool trial_logs = true;

  // Stationary and pixel classification: the library must hold one
  // abstraction per expected stream, in order, with these sub-policies.
  std::vector<int> expected_streams;
  std::vector<SubPolicy> expected_policies;
  // Pixel scenario: latent column per stream, -1 where no latent applies.
  std::vector<int> latent_columns;
  double min_latent_corr = 0.8;
  int eval_batches = 100;

  // Sweep scenario.
  SweepGrid grid;
  int trials_per_point = 10;
  SubPolicy old_policy{{1, 0, 1}};
  SubPolicy new_policy{{0, 1, 1}};
  double stop_epsilon = 1e-3;
};

/// Parses and validates; throws ConfigError naming the field.
ExperimentConfig parse_config(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
void validate(const ExperimentConfig& c);

/// Reads the file, applies CDMISFA_* environment overrides, parses.
ExperimentConfig load_config(const std::filesystem::path& path);

/// CDMISFA_GATING__DELTA=0.001 sets j["gating"]["delta"]. Keys are lower
/// cased, `__` nests, and values are parsed as JSON when possible.
void apply_env_overrides(nlohmann::json& j, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> environment_with_prefix(const std::string& prefix = "CDMISFA_");

StreamSpec parse_stream_spec(const nlohmann::json& j);
nlohmann::json stream_spec_json(const StreamSpec& s);
SubPolicy parse_policy(const std::string& s);

/// Agent config with beta resolved.
AgentConfig effective_agent(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

/// Per-batch CSV log with a header fixed by (components, streams).
class TrialLog {
 public:
  TrialLog(std::ostream& out, int components, int streams);
  void write(const IterationRecord& r);

 private:
  std::ostream& out_;
  int components_;
  int streams_;
};

nlohmann::json freeze_event_json(const FreezeEvent& ev);

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct TrialSummary {
  std::uint64_t seed = 0;
  std::string variant;  // stability: averaged | legacy
  std::vector<SubPolicy> policies;
  int abstraction_count = 0;
  std::vector<std::int64_t> iterations_to_freeze;
  std::vector<Eigen::VectorXd> final_eta;
  std::vector<int> trained_streams;
  std::vector<double> latent_corr;  // pixel: per abstraction, NaN when no latent
  std::string termination;
  std::int64_t iterations = 0;
  int flips = 0;        // stability: greedy flips after epsilon hit 0, before the first freeze
  bool reached_zero = false;
  double epsilon_c = 0.0;  // sweep only
  std::string outcome;
};

nlohmann::json to_json(const TrialSummary& t);

struct RunOptions {
  std::optional<std::filesystem::path> out;  // nullopt: no files
  std::uint64_t seed_offset = 0;
  std::optional<int> jobs;
};

struct RunReport {
  std::vector<TrialSummary> trials;
  nlohmann::json summary;
};

/// Runs all trials of the config's scenario.
RunReport run_experiment(const ExperimentConfig& c, const RunOptions& opt = {});

/// Greedy flips after epsilon reached 0 and before the first freeze.
TrialSummary run_stability_trial(const AgentConfig& config, std::uint64_t seed, std::ostream* log = nullptr);

struct SweepPoint {
  double sigma = 0.0;
  double nu = 0.0;
  int tau = 0;
  EpsilonDTable table;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::vector<TrialSummary> trials;
  nlohmann::json summary;
};

/// Cross product of sigma x nu x tau, each measuring epsilon_d over the
/// epsilon_c grid. Throws std::invalid_argument on an empty grid.
SweepReport run_sweep(const ExperimentConfig& c, const SweepGrid& grid, const RunOptions& opt = {});

// ---------------------------------------------------------------------------
// Library evaluation
// ---------------------------------------------------------------------------

struct AbstractionEval {
  int index = 0;
  Eigen::VectorXd eta_inst_mean;
  double known_fraction = 0.0;
  bool known = false;
  // Per output component, the latent column with the largest |corr|.
  std::vector<int> best_latent;
  std::vector<double> best_corr;
};

/// Runs every frozen abstraction on `batches` fresh batches of stream
/// `stream` in env. Throws std::invalid_argument on a dimension mismatch.
std::vector<AbstractionEval> evaluate_library(const AbstractionLibrary& lib, const EnvConfig& env, int stream,
                                              int batches, std::uint64_t seed, const GatingParams& gating = {});
nlohmann::json to_json(const AbstractionEval& e);

/// Pearson correlation; NaN when either side is constant.
double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace cdmisfa
