#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdmisfa/cdrl.hpp"
#include "cdmisfa/gating.hpp"
#include "cdmisfa/incsfa.hpp"
#include "cdmisfa/stream_env.hpp"

namespace cdmisfa {

enum class RewardRule { Averaged, Legacy };

/// How a batch filtered as known is rewarded. Zero: reward 0 and the
/// weight-change windows skip the batch. XiZero: the batch contributes tau
/// zero weight changes and the reward is computed from the windows as usual.
enum class FilteredReward { Zero, XiZero };

struct EpsilonConfig {
  double initial = 1.2;
  double multiplier = 0.999;
  std::vector<EpsilonSchedule::Stage> stages{{0.8, 0.95, false}};

  EpsilonSchedule make() const { return {initial, multiplier, stages}; }
};

struct AgentConfig {
  EnvConfig env;
  IncSfaParams incsfa;
  GatingParams gating;
  RewardParams reward;
  RewardRule rule = RewardRule::Averaged;
  double legacy_alpha = 0.1;
  FilteredReward filtered_reward = FilteredReward::Zero;
  double discount = 0.9;
  EpsilonConfig epsilon;
  std::int64_t budget = 20000;
  int patience = 500;
  bool reset_reward_on_freeze = true;
  int max_abstractions = 0;  // 0: unlimited
  std::optional<SwapSchedule> swap;
  int eval_batches = 20;     // held-out batches per stream for encoded-stream provenance
  // A batch of tau identical samples has no derivative signal; it is handled
  // like a filtered batch instead of updating the abstraction.
  bool skip_constant_batches = true;
};

enum class Termination { Running, AllLearned, Budget, MaxAbstractions, Stopped };
std::string to_string(Termination t);

struct IterationRecord {
  std::int64_t iteration = 0;
  int u = 1;
  int s = 0;
  int a = 0;
  int s_next = 0;
  double epsilon = 0.0;
  bool novel = true;
  bool constant = false;  // no temporal variation, never used for learning
  bool rewarded = false;
  double reward = 0.0;
  double xi_mean = 0.0;
  double xi_dot = 0.0;
  Eigen::VectorXd eta;
  Eigen::VectorXd eta_dot;
  SubPolicy policy;
  Eigen::MatrixXd q;
  Eigen::MatrixXd expected_reward;
  bool froze = false;
  bool swapped = false;
};

struct FreezeEvent {
  std::int64_t iteration = 0;
  int u = 0;
  int trained_stream = -1;
  Eigen::VectorXd final_eta;
  Eigen::VectorXd stored_mean;
  Eigen::VectorXd stored_sd;
  SubPolicy policy;
};

struct LearnedResult {
  AbstractionLibrary library;
  std::vector<SubPolicy> policies;
  std::vector<std::int64_t> iterations_to_freeze;
  std::vector<Eigen::VectorXd> final_eta;
  Termination termination = Termination::Running;
  std::int64_t iterations = 0;
  SubPolicy last_policy;
};

/// One learning agent: environment, adaptive abstraction, gating, and the
/// curiosity-driven learner, stepped one batch at a time.
class Agent {
 public:
  Agent(AgentConfig config, std::uint64_t seed);

  /// One full cycle: act, observe tau samples, gate, learn, reward, solve,
  /// maybe freeze. Throws std::logic_error once terminated.
  IterationRecord run_iteration();

  bool done() const { return termination_ != Termination::Running; }
  Termination termination() const { return termination_; }
  void stop() {
    if (!done()) termination_ = Termination::Stopped;
  }

  LearnedResult result() const;
  /// Per-stream known verdicts of each frozen abstraction on held-out batches.
  std::vector<std::vector<int>> encoded_streams() const;

  const AgentConfig& config() const { return config_; }
  const Environment& env() const { return env_; }
  const AbstractionLibrary& library() const { return library_; }
  const AdaptiveAbstraction& abstraction() const { return abstraction_; }
  const EtaStats& eta_stats() const { return stats_; }
  const WeightChangeTracker& tracker() const { return tracker_; }
  const RewardTensor& reward_tensor() const;
  const EpsilonSchedule& schedule() const { return schedule_; }
  const SubPolicy& policy() const { return policy_; }
  const std::vector<SubPolicy>& saved_policies() const { return saved_policies_; }
  std::int64_t iteration() const { return iteration_; }
  int u() const { return library_.size() + 1; }

  void on_freeze(std::function<void(const FreezeEvent&)> cb) { freeze_cb_ = std::move(cb); }

 private:
  void fresh_abstraction();
  void do_freeze(IterationRecord& rec);
  void check_termination();
  bool settled_on_one_stream() const;

  AgentConfig config_;
  Rng rng_;
  Environment env_;
  AdaptiveAbstraction abstraction_;
  EtaStats stats_;
  WeightChangeTracker tracker_;
  AbstractionLibrary library_;
  RewardTensor reward_;
  LegacyRewardModel legacy_;
  EpsilonSchedule schedule_;
  SubPolicy policy_;
  Eigen::MatrixXd q_;
  std::vector<SubPolicy> saved_policies_;
  std::vector<std::int64_t> freeze_iterations_;
  std::vector<Eigen::VectorXd> final_etas_;
  std::int64_t iteration_ = 0;
  int consecutive_known_ = 0;
  Termination termination_ = Termination::Running;

  Eigen::VectorXd last_sample_;
  bool have_last_sample_ = false;
  Eigen::VectorXd last_output_;
  bool have_last_output_ = false;
  std::vector<int> recent_streams_;
  std::vector<Eigen::MatrixXd> recent_batches_;

  std::function<void(const FreezeEvent&)> freeze_cb_;
};

using IterationObserver = std::function<void(const IterationRecord&)>;

LearnedResult run_trial(const AgentConfig& config, std::uint64_t seed, const IterationObserver& observer = {},
                        const std::function<void(const FreezeEvent&)>& on_freeze = {});

// ---------------------------------------------------------------------------
// Point-of-no-return estimation for the swap experiment
// ---------------------------------------------------------------------------

enum class SwapOutcome { OldOptimal, NewOptimal, Other };
std::string to_string(SwapOutcome o);

struct SweepTrial {
  double epsilon_c = 0.0;
  std::uint64_t seed = 0;
  SubPolicy policy;
  SwapOutcome outcome = SwapOutcome::Other;
  std::int64_t iterations = 0;
};

struct EpsilonDPoint {
  double epsilon_c = 0.0;
  int old_count = 0;
  int new_count = 0;
  int other_count = 0;
  SwapOutcome majority = SwapOutcome::Other;
};

struct EpsilonDTable {
  std::vector<EpsilonDPoint> points;  // sorted by descending epsilon_c
  std::vector<SweepTrial> trials;
  std::optional<double> epsilon_d;   // nullopt when out of grid
};

struct EpsilonDOptions {
  SubPolicy old_policy{{1, 0, 1}};
  SubPolicy new_policy{{0, 1, 1}};
  double stop_epsilon = 1e-3;
  int jobs = 1;
};

/// One swap trial run until the first freeze or epsilon < stop_epsilon.
SweepTrial run_swap_trial(const AgentConfig& config, double epsilon_c, std::uint64_t seed,
                          const EpsilonDOptions& options, const IterationObserver& observer = {});

/// Majority outcome per grid point and epsilon_d as the midpoint of the
/// best new-above/old-below split between adjacent grid points.
EpsilonDTable summarize_epsilon_d(std::vector<SweepTrial> trials);

EpsilonDTable measure_epsilon_d(const AgentConfig& config, const std::vector<double>& grid, int trials_per_point,
                                std::uint64_t seed_base, const EpsilonDOptions& options = {});

/// Runs f(i) for i in [0, count) on `jobs` worker threads.
void parallel_for(int count, int jobs, const std::function<void(int)>& f);

}  // namespace cdmisfa
