#include "cdmisfa/cdrl.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdmisfa {

std::size_t RewardTensor::index(int s, int a, int s_next) const {
  if (s < 0 || s >= n_ || a < 0 || a >= kNumActions || s_next < 0 || s_next >= n_)
    throw std::out_of_range("reward tensor index out of range");
  return (static_cast<std::size_t>(s) * kNumActions + a) * n_ + s_next;
}

double RewardTensor::norm() const {
  double acc = 0.0;
  for (double v : data_) acc += v * v;
  return std::sqrt(acc);
}

void RewardTensor::update(int s, int a, int s_next, double r) {
  const std::size_t hit = index(s, a, s_next);
  ++t_;
  const double w = 1.0 / static_cast<double>(t_);
  for (auto& v : data_) v *= (1.0 - w);
  data_[hit] += w * r;
}

void RewardTensor::reset() {
  std::fill(data_.begin(), data_.end(), 0.0);
  t_ = 0;
}

LegacyRewardModel::LegacyRewardModel(int n, double alpha) : alpha_(alpha), raw_(n), normalized_(n) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("legacy alpha must be in (0, 1]");
}

void LegacyRewardModel::update(int s, int a, int s_next, double r) {
  double& cell = raw_.at(s, a, s_next);
  cell = alpha_ * r + (1.0 - alpha_) * cell;
  const double nrm = raw_.norm();
  for (int i = 0; i < raw_.streams(); ++i)
    for (int b = 0; b < kNumActions; ++b)
      for (int j = 0; j < raw_.streams(); ++j)
        normalized_.at(i, b, j) = nrm > 0.0 ? raw_(i, b, j) / nrm : 0.0;
}

void LegacyRewardModel::reset() {
  raw_.reset();
  normalized_.reset();
}

double default_beta(double nu, int n) {
  if (n < 2) throw std::invalid_argument("beta needs n >= 2");
  return nu * std::log(2.0) / (2.0 * (n - 1));
}

double intrinsic_reward(double xi_mean, double xi_dot, const RewardParams& p) {
  double expert = 0.0;
  if (p.sigma > 0.0)
    expert = std::exp(-xi_mean * xi_mean / (2.0 * p.sigma * p.sigma));
  else
    expert = xi_mean == 0.0 ? 1.0 : 0.0;
  return -xi_dot + p.beta * expert;
}

std::string SubPolicy::to_string() const {
  std::string s;
  for (int a : actions) s += static_cast<char>('0' + a);
  return s;
}

Eigen::MatrixXd expected_rewards(const RewardTensor& r) {
  const int n = r.streams();
  Eigen::MatrixXd out(n, kNumActions);
  for (int s = 0; s < n; ++s) {
    out(s, 0) = r(s, 0, s);
    double acc = 0.0;
    for (int j = 0; j < n; ++j)
      if (j != s) acc += r(s, 1, j);
    out(s, 1) = acc / (n - 1);
  }
  return out;
}

SubPolicy greedy_policy(const Eigen::MatrixXd& q) {
  SubPolicy p;
  p.actions.resize(q.rows());
  for (Eigen::Index s = 0; s < q.rows(); ++s) {
    const double scale = std::max({1.0, std::abs(q(s, 0)), std::abs(q(s, 1))});
    p.actions[s] = q(s, 1) > q(s, 0) + 1e-12 * scale ? 1 : 0;
  }
  return p;
}

namespace {

// Feature index of (s, a) under one-hot features.
int feat(int s, int a) { return s * kNumActions + a; }

Eigen::VectorXd lstdq(const Eigen::MatrixXd& reward, const SubPolicy& policy, double discount) {
  const int n = static_cast<int>(reward.rows());
  const int k = n * kNumActions;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(k, k);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
  for (int s = 0; s < n; ++s) {
    for (int act = 0; act < kNumActions; ++act) {
      const int row = feat(s, act);
      Eigen::VectorXd next = Eigen::VectorXd::Zero(k);
      if (act == 0) {
        next(feat(s, policy.actions[s])) = 1.0;
      } else {
        for (int j = 0; j < n; ++j)
          if (j != s) next(feat(j, policy.actions[j])) += 1.0 / (n - 1);
      }
      Eigen::VectorXd phi = Eigen::VectorXd::Zero(k);
      phi(row) = 1.0;
      a += phi * (phi - discount * next).transpose();
      b += phi * reward(s, act);
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) throw std::runtime_error("LSTD-Q system is singular");
  return lu.solve(b);
}

}  // namespace

PolicySolution solve_policy(const RewardTensor& r, double discount) {
  if (!(discount >= 0.0 && discount < 1.0)) throw std::invalid_argument("discount must be in [0, 1)");
  for (double v : r.data())
    if (!std::isfinite(v)) throw std::invalid_argument("reward tensor has non-finite entries");
  const int n = r.streams();
  const Eigen::MatrixXd rew = expected_rewards(r);
  PolicySolution sol;
  sol.policy.actions.assign(n, 0);
  sol.q.discount = discount;
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd w = lstdq(rew, sol.policy, discount);
    sol.q.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        w.data(), n, kNumActions);
    sol.iterations = it + 1;
    SubPolicy next = greedy_policy(sol.q.values);
    if (next == sol.policy) break;
    sol.policy = std::move(next);
  }
  return sol;
}

EpsilonSchedule::EpsilonSchedule(double initial, double multiplier, std::vector<Stage> stages)
    : initial_(initial), value_(initial), multiplier_(multiplier), stages_(std::move(stages)) {
  if (initial < 0.0) throw std::invalid_argument("epsilon must be non-negative");
  if (!(multiplier >= 0.0 && multiplier <= 1.0)) throw std::invalid_argument("epsilon multiplier must be in [0, 1]");
  for (const auto& s : stages_)
    if (!(s.multiplier >= 0.0 && s.multiplier <= 1.0)) throw std::invalid_argument("stage multiplier must be in [0, 1]");
  std::sort(stages_.begin(), stages_.end(), [](const Stage& a, const Stage& b) { return a.below > b.below; });
}

void EpsilonSchedule::step() {
  double m = multiplier_;
  for (const auto& s : stages_)
    if (!s.hard_zero && value_ < s.below) m = s.multiplier;
  value_ *= m;
  for (const auto& s : stages_)
    if (s.hard_zero && value_ < s.below) value_ = 0.0;
}

Action select_action(const SubPolicy& policy, StreamId s, EpsilonSchedule& schedule, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Action a;
  if (u(rng) < schedule.probability()) {
    std::uniform_int_distribution<int> coin(0, 1);
    a = static_cast<Action>(coin(rng));
  } else {
    a = policy[s.index];
  }
  schedule.step();
  return a;
}

}  // namespace cdmisfa
