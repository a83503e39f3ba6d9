#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdmisfa/stream_env.hpp"

namespace cdmisfa {

constexpr int kNumActions = 2;

/// R(s, a, s') over n streams and {stay, switch}.
class RewardTensor {
 public:
  RewardTensor() = default;
  explicit RewardTensor(int n) : n_(n), data_(static_cast<std::size_t>(n) * kNumActions * n, 0.0) {}

  int streams() const { return n_; }
  std::int64_t updates() const { return t_; }
  double operator()(int s, int a, int s_next) const { return data_[index(s, a, s_next)]; }
  double& at(int s, int a, int s_next) { return data_[index(s, a, s_next)]; }
  const std::vector<double>& data() const { return data_; }
  double norm() const;

  /// R <- (1/t) R~ + (1 - 1/t) R, R~ one-hot at (s, a, s'). t counts updates.
  void update(int s, int a, int s_next, double r);

  void reset();

 private:
  std::size_t index(int s, int a, int s_next) const;

  int n_ = 0;
  std::int64_t t_ = 0;
  std::vector<double> data_;
};

/// Local tabular update of the earlier curiosity learner: EMA at the visited
/// cell of the raw table, then global normalization.
class LegacyRewardModel {
 public:
  LegacyRewardModel() = default;
  LegacyRewardModel(int n, double alpha);

  void update(int s, int a, int s_next, double r);
  const RewardTensor& raw() const { return raw_; }
  const RewardTensor& normalized() const { return normalized_; }
  RewardTensor& mutable_raw() { return raw_; }
  void reset();
  double alpha() const { return alpha_; }

 private:
  double alpha_ = 0.1;
  RewardTensor raw_;
  RewardTensor normalized_;
};

struct RewardParams {
  double beta = 0.0;
  double sigma = 0.0009;
};

/// beta = nu * log 2 / (2 (n - 1)).
double default_beta(double nu, int n);

/// r = -xi_dot + beta * exp(-xi_mean^2 / (2 sigma^2)). With sigma == 0 the
/// expert term is beta when xi_mean == 0 and 0 otherwise.
double intrinsic_reward(double xi_mean, double xi_dot, const RewardParams& p);

struct SubPolicy {
  std::vector<int> actions;  // 0 = stay, 1 = switch, one per stream

  int size() const { return static_cast<int>(actions.size()); }
  Action operator[](int s) const { return static_cast<Action>(actions.at(s)); }
  std::string to_string() const;
  friend bool operator==(const SubPolicy&, const SubPolicy&) = default;
};

struct QFunction {
  Eigen::MatrixXd values;  // n x 2
  double discount = 0.9;
};

struct PolicySolution {
  QFunction q;
  SubPolicy policy;
  int iterations = 0;
};

/// Expected immediate reward under the known stay/switch transition law
/// (n x 2).
Eigen::MatrixXd expected_rewards(const RewardTensor& r);

/// Policy iteration with LSTD-Q on tabular indicator features and the exact
/// transition model. Ties prefer stay.
PolicySolution solve_policy(const RewardTensor& r, double discount);

/// Greedy policy from Q, ties to stay.
SubPolicy greedy_policy(const Eigen::MatrixXd& q);

/// Decaying epsilon with optional stage rules keyed on the current value.
class EpsilonSchedule {
 public:
  struct Stage {
    double below = 0.8;
    double multiplier = 0.95;
    bool hard_zero = false;  // set epsilon to 0 once it drops below `below`
  };

  EpsilonSchedule() = default;
  EpsilonSchedule(double initial, double multiplier, std::vector<Stage> stages = {});

  double value() const { return value_; }
  double probability() const { return std::min(value_, 1.0); }
  double initial() const { return initial_; }
  double multiplier() const { return multiplier_; }
  const std::vector<Stage>& stages() const { return stages_; }
  void step();
  void reset() { value_ = initial_; }

 private:
  double initial_ = 1.0;
  double value_ = 1.0;
  double multiplier_ = 1.0;
  std::vector<Stage> stages_;
};

/// With probability min(eps, 1) a uniform random action, otherwise pi[s].
/// Advances the schedule by one decay step.
Action select_action(const SubPolicy& policy, StreamId s, EpsilonSchedule& schedule, Rng& rng);

}  // namespace cdmisfa
