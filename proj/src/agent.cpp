#include "cdmisfa/agent.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <map>
#include <stdexcept>
#include <thread>

namespace cdmisfa {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out[0];
}

constexpr int kRecentStreams = 20;

}  // namespace

std::string to_string(Termination t) {
  switch (t) {
    case Termination::Running: return "running";
    case Termination::AllLearned: return "all-learned";
    case Termination::Budget: return "budget";
    case Termination::MaxAbstractions: return "max-abstractions";
    case Termination::Stopped: return "stopped";
  }
  return "?";
}

std::string to_string(SwapOutcome o) {
  switch (o) {
    case SwapOutcome::OldOptimal: return "old-optimal";
    case SwapOutcome::NewOptimal: return "new-optimal";
    case SwapOutcome::Other: return "other";
  }
  return "?";
}

Agent::Agent(AgentConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      rng_(derive_seed(seed, 1)),
      env_(config_.env, derive_seed(seed, 2)),
      abstraction_(env_.input_dim(), config_.incsfa, rng_),
      stats_(config_.incsfa.output_dim, config_.gating, env_.tau()),
      tracker_(env_.tau()),
      reward_(env_.num_streams()),
      legacy_(env_.num_streams(), config_.legacy_alpha),
      schedule_(config_.epsilon.make()) {
  if (config_.gating.delta <= 0.0) throw std::invalid_argument("delta must be positive");
  policy_.actions.assign(env_.num_streams(), 0);
  q_ = Eigen::MatrixXd::Zero(env_.num_streams(), kNumActions);
  if (config_.budget <= 0) termination_ = Termination::Budget;
}

const RewardTensor& Agent::reward_tensor() const {
  return config_.rule == RewardRule::Legacy ? legacy_.normalized() : reward_;
}

void Agent::fresh_abstraction() {
  abstraction_ = AdaptiveAbstraction(env_.input_dim(), config_.incsfa, rng_);
  stats_ = EtaStats(config_.incsfa.output_dim, config_.gating, env_.tau());
  tracker_ = WeightChangeTracker(env_.tau());
  have_last_output_ = false;
  recent_streams_.clear();
  recent_batches_.clear();
}

void Agent::do_freeze(IterationRecord& rec) {
  Provenance prov;
  prov.index = u();
  prov.iteration = iteration_;
  if (!recent_streams_.empty()) {
    std::map<int, int> counts;
    for (int s : recent_streams_) ++counts[s];
    prov.trained_stream =
        std::max_element(counts.begin(), counts.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
  }
  FrozenAbstraction frozen = freeze(abstraction_, stats_, config_.gating, prov, recent_batches_);

  FreezeEvent ev;
  ev.iteration = iteration_;
  ev.u = prov.index;
  ev.trained_stream = prov.trained_stream;
  ev.final_eta = frozen.final_eta();
  ev.stored_mean = frozen.eta_mean();
  ev.stored_sd = frozen.eta_sd();
  ev.policy = policy_;

  library_.append(std::move(frozen));
  saved_policies_.push_back(policy_);
  freeze_iterations_.push_back(iteration_);
  final_etas_.push_back(ev.final_eta);

  schedule_.reset();
  fresh_abstraction();
  if (config_.reset_reward_on_freeze) {
    reward_.reset();
    legacy_.reset();
    policy_.actions.assign(env_.num_streams(), 0);
    q_.setZero();
  }
  consecutive_known_ = 0;
  rec.froze = true;
  if (freeze_cb_) freeze_cb_(ev);
}

IterationRecord Agent::run_iteration() {
  if (done()) throw std::logic_error("agent has terminated: " + to_string(termination_));

  IterationRecord rec;
  rec.iteration = iteration_;
  rec.u = u();
  rec.s = env_.current().index;
  rec.a = static_cast<int>(select_action(policy_, env_.current(), schedule_, rng_));
  rec.epsilon = schedule_.value();
  if (config_.swap) rec.swapped = env_.apply_swap(*config_.swap, schedule_.value());

  const ObservationBatch batch = env_.step(static_cast<Action>(rec.a));
  rec.s_next = batch.stream.index;
  rec.constant = config_.skip_constant_batches && is_constant(batch);
  rec.novel = !rec.constant && is_novel(batch, library_, config_.gating);

  const bool continues = batch.continues && have_last_sample_;
  if (rec.novel) {
    std::vector<Eigen::VectorXd> outputs;
    outputs.reserve(batch.size());
    // A batch that still contains warm-up steps (xi = 0) stays out of the
    // windows entirely, so windows open on a clean batch and stay aligned
    // with batch boundaries.
    const bool track = abstraction_.ready();
    for (int i = 0; i < batch.size(); ++i) {
      const Eigen::VectorXd x = batch.samples.row(i).transpose();
      const Eigen::VectorXd prev_row = i > 0 ? Eigen::VectorXd(batch.samples.row(i - 1).transpose()) : Eigen::VectorXd();
      const Eigen::VectorXd* prev = i > 0 ? &prev_row : (continues ? &last_sample_ : nullptr);
      const double xi = abstraction_.update(x, prev);
      if (track) tracker_.push(xi);
      if (abstraction_.ready()) outputs.push_back(abstraction_.output(x));
    }
    Eigen::MatrixXd out(outputs.size(), config_.incsfa.output_dim);
    for (std::size_t i = 0; i < outputs.size(); ++i) out.row(i) = outputs[i].transpose();
    const bool full = static_cast<int>(outputs.size()) == batch.size();
    stats_.update(out, (continues && have_last_output_ && full) ? &last_output_ : nullptr);
    if (!outputs.empty()) {
      last_output_ = outputs.back();
      have_last_output_ = true;
    }
    if (config_.gating.rescore_band) {
      recent_batches_.push_back(batch.samples);
      const int keep = std::max(config_.gating.inst_window, 2);
      if (static_cast<int>(recent_batches_.size()) > keep) recent_batches_.erase(recent_batches_.begin());
    }
    recent_streams_.push_back(rec.s_next);
    const int keep_streams = std::max(kRecentStreams, config_.gating.settle_batches);
    if (static_cast<int>(recent_streams_.size()) > keep_streams) recent_streams_.erase(recent_streams_.begin());
    consecutive_known_ = 0;
  } else {
    have_last_output_ = false;
    ++consecutive_known_;
    if (config_.filtered_reward == FilteredReward::XiZero)
      for (int i = 0; i < batch.size(); ++i) tracker_.push(0.0);
  }
  last_sample_ = batch.samples.row(batch.size() - 1).transpose();
  have_last_sample_ = true;

  const bool use_windows = rec.novel || config_.filtered_reward == FilteredReward::XiZero;
  if (use_windows && tracker_.windows() >= 2) {
    std::tie(rec.xi_mean, rec.xi_dot) = tracker_.window_means();
    rec.reward = intrinsic_reward(rec.xi_mean, rec.xi_dot, config_.reward);
    rec.rewarded = true;
  } else if (!rec.novel) {
    rec.reward = 0.0;
    rec.rewarded = true;
  }

  if (rec.novel && stats_.converged() && settled_on_one_stream()) {
    do_freeze(rec);
  } else if (rec.rewarded) {
    if (config_.rule == RewardRule::Legacy) {
      legacy_.update(rec.s, rec.a, rec.s_next, rec.reward);
    } else {
      reward_.update(rec.s, rec.a, rec.s_next, rec.reward);
    }
    const PolicySolution sol = solve_policy(reward_tensor(), config_.discount);
    policy_ = sol.policy;
    q_ = sol.q.values;
  }

  rec.eta = stats_.eta();
  rec.eta_dot = stats_.eta_dot();
  rec.policy = policy_;
  rec.q = q_;
  rec.expected_reward = expected_rewards(reward_tensor());
  ++iteration_;
  check_termination();
  return rec;
}

bool Agent::settled_on_one_stream() const {
  if (!config_.gating.settle_single_stream) return true;
  const int need = std::max(1, config_.gating.settle_batches);
  if (static_cast<int>(recent_streams_.size()) < need) return false;
  return std::all_of(recent_streams_.end() - need, recent_streams_.end(),
                     [&](int s) { return s == recent_streams_.back(); });
}

void Agent::check_termination() {
  if (config_.max_abstractions > 0 && library_.size() >= config_.max_abstractions)
    termination_ = Termination::MaxAbstractions;
  else if (!library_.empty() && consecutive_known_ >= config_.patience)
    termination_ = Termination::AllLearned;
  else if (iteration_ >= config_.budget)
    termination_ = Termination::Budget;
}

std::vector<std::vector<int>> Agent::encoded_streams() const {
  std::vector<std::vector<int>> out(library_.size());
  Environment probe = env_;
  for (int s = 0; s < probe.num_streams(); ++s) {
    std::vector<int> known(library_.size(), 0);
    for (int b = 0; b < config_.eval_batches; ++b) {
      const ObservationBatch batch = probe.peek_batch(StreamId{s});
      for (int k = 0; k < library_.size(); ++k)
        known[k] += library_[k].knows(batch, config_.gating.band_width, config_.gating.var_floor) ? 1 : 0;
    }
    for (int k = 0; k < library_.size(); ++k)
      if (2 * known[k] > config_.eval_batches) out[k].push_back(s);
  }
  return out;
}

LearnedResult Agent::result() const {
  LearnedResult r;
  const auto encoded = encoded_streams();
  for (int k = 0; k < library_.size(); ++k) r.library.append(library_[k].with_encoded_streams(encoded[k]));
  r.policies = saved_policies_;
  r.iterations_to_freeze = freeze_iterations_;
  r.final_eta = final_etas_;
  r.termination = termination_;
  r.iterations = iteration_;
  r.last_policy = policy_;
  return r;
}

LearnedResult run_trial(const AgentConfig& config, std::uint64_t seed, const IterationObserver& observer,
                        const std::function<void(const FreezeEvent&)>& on_freeze) {
  Agent agent(config, seed);
  if (on_freeze) agent.on_freeze(on_freeze);
  while (!agent.done()) {
    const IterationRecord rec = agent.run_iteration();
    if (observer) observer(rec);
  }
  return agent.result();
}

// ---------------------------------------------------------------------------

SweepTrial run_swap_trial(const AgentConfig& config, double epsilon_c, std::uint64_t seed,
                          const EpsilonDOptions& options, const IterationObserver& observer) {
  AgentConfig cfg = config;
  if (!cfg.swap) throw std::invalid_argument("swap trial needs a swap schedule");
  cfg.swap->epsilon_c = epsilon_c;
  cfg.swap->fired = false;
  cfg.max_abstractions = 1;
  Agent agent(cfg, seed);
  SweepTrial t;
  t.epsilon_c = epsilon_c;
  t.seed = seed;
  SubPolicy at_freeze;
  agent.on_freeze([&](const FreezeEvent& ev) { at_freeze = ev.policy; });
  while (!agent.done()) {
    const IterationRecord rec = agent.run_iteration();
    if (observer) observer(rec);
    if (agent.schedule().value() < options.stop_epsilon && agent.library().empty()) agent.stop();
  }
  t.policy = agent.library().empty() ? agent.policy() : at_freeze;
  t.iterations = agent.iteration();
  if (t.policy == options.new_policy)
    t.outcome = SwapOutcome::NewOptimal;
  else if (t.policy == options.old_policy)
    t.outcome = SwapOutcome::OldOptimal;
  else
    t.outcome = SwapOutcome::Other;
  return t;
}

EpsilonDTable summarize_epsilon_d(std::vector<SweepTrial> trials) {
  EpsilonDTable table;
  std::map<double, EpsilonDPoint, std::greater<>> points;
  for (const auto& t : trials) {
    auto& p = points[t.epsilon_c];
    p.epsilon_c = t.epsilon_c;
    switch (t.outcome) {
      case SwapOutcome::OldOptimal: ++p.old_count; break;
      case SwapOutcome::NewOptimal: ++p.new_count; break;
      case SwapOutcome::Other: ++p.other_count; break;
    }
  }
  for (auto& [eps, p] : points) {
    if (p.new_count > p.old_count && p.new_count > p.other_count)
      p.majority = SwapOutcome::NewOptimal;
    else if (p.old_count > p.new_count && p.old_count > p.other_count)
      p.majority = SwapOutcome::OldOptimal;
    else
      p.majority = SwapOutcome::Other;
    table.points.push_back(p);
  }
  table.trials = std::move(trials);

  // Split k puts points [0, k) on the new side and [k, m) on the old side.
  const int m = static_cast<int>(table.points.size());
  int best_score = -1;
  std::vector<int> best;
  for (int k = 0; k <= m; ++k) {
    int score = 0;
    for (int i = 0; i < m; ++i) {
      const auto want = i < k ? SwapOutcome::NewOptimal : SwapOutcome::OldOptimal;
      score += table.points[i].majority == want ? 1 : 0;
    }
    if (score > best_score) {
      best_score = score;
      best = {k};
    } else if (score == best_score) {
      best.push_back(k);
    }
  }
  double acc = 0.0;
  int inside = 0;
  for (int k : best) {
    if (k == 0 || k == m) continue;
    acc += 0.5 * (table.points[k - 1].epsilon_c + table.points[k].epsilon_c);
    ++inside;
  }
  if (inside > 0 && inside == static_cast<int>(best.size())) table.epsilon_d = acc / inside;
  return table;
}

EpsilonDTable measure_epsilon_d(const AgentConfig& config, const std::vector<double>& grid, int trials_per_point,
                                std::uint64_t seed_base, const EpsilonDOptions& options) {
  if (grid.empty()) throw std::invalid_argument("epsilon_c grid is empty");
  if (trials_per_point < 1) throw std::invalid_argument("trials per point must be positive");
  const int total = static_cast<int>(grid.size()) * trials_per_point;
  std::vector<SweepTrial> trials(total);
  parallel_for(total, options.jobs, [&](int i) {
    const double eps = grid[i / trials_per_point];
    const std::uint64_t seed = seed_base + static_cast<std::uint64_t>(i % trials_per_point);
    trials[i] = run_swap_trial(config, eps, seed, options);
  });
  return summarize_epsilon_d(std::move(trials));
}

void parallel_for(int count, int jobs, const std::function<void(int)>& f) {
  jobs = std::max(1, std::min(jobs, count));
  if (jobs == 1) {
    for (int i = 0; i < count; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace cdmisfa
