// Acceptance run: one PASS/FAIL line per criterion, report in <out>/acceptance.json.
// Exit status is 0 unless something throws, or --strict is given and a
// criterion fails.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"

#include "cdmisfa/harness.hpp"

using namespace cdmisfa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
  json data;
};

std::string fmt(double v, int prec = 4) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

ExperimentConfig config(const std::string& name) {
  return load_config(fs::path(CDMISFA_SOURCE_DIR) / "configs" / (name + ".json"));
}

std::optional<double> eps_d_at(const SweepReport& rep, double sigma, double nu, int tau) {
  for (const auto& p : rep.points)
    if (p.sigma == sigma && p.nu == nu && p.tau == tau) return p.table.epsilon_d;
  throw std::logic_error("sweep point missing");
}

std::string eps_d_text(const std::optional<double>& e) { return e ? fmt(*e) : "out-of-grid"; }

json eps_d_json(const std::optional<double>& e) { return e ? json(*e) : json(nullptr); }

// Majority counts per epsilon_c, highest first, as "new/old/other".
std::string split_text(const EpsilonDTable& t) {
  std::string s;
  for (const auto& p : t.points) {
    if (!s.empty()) s += ' ';
    s += fmt(p.epsilon_c, 3) + ":" + std::to_string(p.new_count) + "/" + std::to_string(p.old_count) + "/" +
         std::to_string(p.other_count);
  }
  return s;
}

// ---------------------------------------------------------------------------

Outcome stationary_ordering(const fs::path& out) {
  const ExperimentConfig c = config("stationary");
  const RunReport rep = run_experiment(c, {out / "stationary", 0, std::nullopt});
  const int matched = rep.summary["matched"].get<int>();
  std::map<std::string, int> seen;
  for (const auto& t : rep.trials) {
    std::string key;
    for (int s : t.trained_streams) key += std::to_string(s);
    key += ":";
    for (const auto& p : t.policies) key += p.to_string() + ",";
    ++seen[key];
  }
  Outcome o;
  o.pass = matched >= 18;
  o.detail = std::to_string(matched) + "/" + std::to_string(c.trials) + " trials encode x1, x2, x3 in order with "
             "policies 011, 101, 110 (need >= 18)";
  o.data = {{"matched", matched}, {"trials", c.trials}, {"outcomes", seen}};
  return o;
}

struct SweepResults {
  SweepReport sigma, nu, tau;
  double base_sigma = 0, base_nu = 0;
  int base_tau = 0;
};

const SweepResults& sweeps(const fs::path& out) {
  static std::optional<SweepResults> cache;
  if (cache) return *cache;
  const ExperimentConfig c = config("nonstationary");
  SweepResults r;
  r.base_sigma = c.agent.reward.sigma;
  r.base_nu = c.agent.incsfa.learning_rate;
  r.base_tau = c.agent.env.tau;
  SweepGrid g;
  g.sigma = {0.0, 0.0001, 0.0009, 0.003, 0.008};
  r.sigma = run_sweep(c, g, {out / "sweep_sigma", 0, std::nullopt});
  g = {};
  g.nu = {0.02, 0.03, 0.04, 0.05};
  r.nu = run_sweep(c, g, {out / "sweep_nu", 0, std::nullopt});
  g = {};
  g.tau = {10, 30, 50, 100};
  r.tau = run_sweep(c, g, {out / "sweep_tau", 0, std::nullopt});
  cache = std::move(r);
  return *cache;
}

Outcome epsilon_d_vs_sigma(const fs::path& out) {
  const SweepResults& s = sweeps(out);
  Outcome o;
  std::vector<std::optional<double>> e;
  json pts = json::array();
  std::string text;
  for (const auto& p : s.sigma.points) {
    e.push_back(p.table.epsilon_d);
    pts.push_back({{"sigma", p.sigma}, {"epsilon_d", eps_d_json(p.table.epsilon_d)}, {"split", split_text(p.table)}});
    text += " sigma=" + fmt(p.sigma) + ":" + eps_d_text(p.table.epsilon_d);
  }
  bool defined = std::all_of(e.begin(), e.end(), [](const auto& v) { return v.has_value(); });
  bool monotone = defined;
  for (std::size_t i = 1; defined && i < e.size(); ++i) monotone = monotone && *e[i] >= *e[i - 1];
  const auto lo = eps_d_at(s.sigma, 0.0001, s.base_nu, s.base_tau);
  const auto hi = eps_d_at(s.sigma, 0.008, s.base_nu, s.base_tau);
  const bool lo_ok = lo && *lo >= 0.55 && *lo <= 0.75;
  const bool hi_ok = hi && *hi >= 0.79 && *hi <= 0.99;
  o.pass = monotone && lo_ok && hi_ok;
  o.detail = "epsilon_d" + text + "; monotone " + (monotone ? "yes" : "no") + ", sigma=0.0001 in [0.55,0.75] " +
             (lo_ok ? "yes" : "no") + ", sigma=0.008 in [0.79,0.99] " + (hi_ok ? "yes" : "no");
  o.data = {{"points", pts}};
  return o;
}

Outcome epsilon_d_insensitivity(const fs::path& out) {
  const SweepResults& s = sweeps(out);
  Outcome o;
  auto spread = [](const SweepReport& rep, std::function<bool(const SweepPoint&)> keep, std::string& text,
                   json& pts) -> std::optional<double> {
    double lo = 1e9, hi = -1e9;
    bool all = true;
    for (const auto& p : rep.points) {
      const std::string label = "nu=" + fmt(p.nu) + ",tau=" + std::to_string(p.tau);
      pts.push_back({{"nu", p.nu}, {"tau", p.tau}, {"epsilon_d", eps_d_json(p.table.epsilon_d)},
                     {"split", split_text(p.table)}});
      text += " " + label + ":" + eps_d_text(p.table.epsilon_d);
      if (!keep(p)) continue;
      if (!p.table.epsilon_d) {
        all = false;
        continue;
      }
      lo = std::min(lo, *p.table.epsilon_d);
      hi = std::max(hi, *p.table.epsilon_d);
    }
    if (!all) return std::nullopt;
    return hi - lo;
  };
  std::string text;
  json pts = json::array();
  const auto nu_spread = spread(s.nu, [](const SweepPoint&) { return true; }, text, pts);
  const auto tau_spread = spread(s.tau, [](const SweepPoint& p) { return p.tau != 10; }, text, pts);
  const bool nu_ok = nu_spread && *nu_spread <= 0.10;
  const bool tau_ok = tau_spread && *tau_spread <= 0.10;
  o.pass = nu_ok && tau_ok;
  o.detail = "epsilon_d" + text + "; spread over nu " + (nu_spread ? fmt(*nu_spread) : "undefined") +
             ", over tau in {30,50,100} " + (tau_spread ? fmt(*tau_spread) : "undefined") + " (need <= 0.10)";
  o.data = {{"points", pts}};
  return o;
}

Outcome stability_comparison(const fs::path& out) {
  const ExperimentConfig c = config("stability");
  const RunReport rep = run_experiment(c, {out / "stability", 0, std::nullopt});
  const int legacy = rep.summary["legacy_flipped"].get<int>();
  const int averaged = rep.summary["averaged_no_flip"].get<int>();
  int reached = 0;
  for (const auto& t : rep.trials) reached += t.reached_zero;
  Outcome o;
  o.pass = legacy >= 7 && averaged >= 9;
  o.detail = "legacy rule flipped after epsilon = 0 in " + std::to_string(legacy) + "/" + std::to_string(c.trials) +
             " trials (need >= 7); count-weighted rule stayed flip-free in " + std::to_string(averaged) + "/" +
             std::to_string(c.trials) + " (need >= 9)";
  o.data = {{"legacy_flipped", legacy}, {"averaged_no_flip", averaged}, {"runs_reaching_zero", reached}};
  return o;
}

Outcome incsfa_fidelity() {
  constexpr std::int64_t train = 50000;
  constexpr int window = 10000;
  Outcome o;
  o.pass = true;
  json per = json::object();
  for (auto f : {OscFamily::X1, OscFamily::X2, OscFamily::X3}) {
    Rng rng(17);
    AdaptiveAbstraction a(2, IncSfaParams{}, rng);
    Eigen::VectorXd prev;
    for (std::int64_t t = 0; t < train; ++t) {
      const Eigen::VectorXd x = osc_sample(f, t);
      a.update(x, t ? &prev : nullptr);
      prev = x;
    }
    Eigen::MatrixXd w(window, 2);
    for (int i = 0; i < window; ++i) w.row(i) = osc_sample(f, train + i).transpose();
    const auto ref = oracle::batch_sfa(w, 2);
    const double r = std::abs(oracle::pearson(a.extractor().apply_rows(w).col(0), ref.apply(w).col(0)));
    o.pass = o.pass && r >= 0.95;
    o.detail += to_string(f) + " |corr| " + fmt(r) + "; ";
    per[to_string(f)] = r;
  }
  o.detail += "need >= 0.95 each, after " + std::to_string(train) + " updates over a " + std::to_string(window) +
              "-sample window";
  o.data = per;
  return o;
}

Outcome eta_fidelity() {
  constexpr int n = 10000;
  std::vector<std::pair<std::string, Eigen::VectorXd>> signals;
  Rng rng(23);
  std::normal_distribution<double> g;
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = std::sin(2 * std::numbers::pi * i / 500.0);
  signals.emplace_back("sine-500", y);
  for (int i = 0; i < n; ++i) y(i) = std::sin(2 * std::numbers::pi * i / 37.0) + 0.2 * g(rng);
  signals.emplace_back("sine-37+noise", y);
  double ar = 0.0;
  for (int i = 0; i < n; ++i) y(i) = ar = 0.95 * ar + g(rng);
  signals.emplace_back("ar1-0.95", y);
  for (int i = 0; i < n; ++i) y(i) = g(rng);
  signals.emplace_back("white", y);
  for (auto f : {OscFamily::X1, OscFamily::X2, OscFamily::X3}) {
    for (int i = 0; i < n; ++i) y(i) = osc_sample(f, i)(0);
    signals.emplace_back(to_string(f) + "[0]", y);
  }

  Outcome o;
  double worst = 0.0, worst_scale = 0.0, worst_ema = 0.0;
  json per = json::object();
  for (const auto& [name, sig] : signals) {
    const double ref = oracle::two_pass_eta(sig);
    StreamingEta st(1);
    EtaStats ema(1, GatingParams{}, 100);
    for (int i = 0; i < n; ++i) st.push(sig.segment(i, 1));
    Eigen::VectorXd last;
    for (int b = 0; b < n / 100; ++b) {
      const Eigen::MatrixXd chunk = sig.segment(b * 100, 100);
      ema.update(chunk, b ? &last : nullptr);
      last = chunk.row(99).transpose();
    }
    const double rel = std::abs(st.eta()(0) - ref) / ref;
    const double rel_ema = std::abs(ema.eta()(0) - ref) / ref;
    worst = std::max(worst, rel);
    worst_ema = std::max(worst_ema, rel_ema);
    for (double k : {1e-4, 1e-2, 1e2, 1e4, 1e6}) {
      const Eigen::MatrixXd scaled = k * sig;
      const double e0 = eta_inst(Eigen::MatrixXd(sig)).eta(0), e1 = eta_inst(scaled).eta(0);
      StreamingEta sk(1);
      for (int i = 0; i < n; ++i) sk.push(scaled.col(0).segment(i, 1));
      worst_scale = std::max({worst_scale, std::abs(e1 - e0) / e0, std::abs(sk.eta()(0) - st.eta()(0)) / st.eta()(0)});
    }
    per[name] = {{"two_pass", ref}, {"streaming", st.eta()(0)}, {"ema", ema.eta()(0)}};
  }
  o.pass = worst <= 0.05 && worst_scale <= 1e-10;
  o.detail = "streaming vs two-pass max rel. error " + fmt(worst, 3) + " (need <= 0.05); scale invariance max rel. " +
             fmt(worst_scale, 3) + " over scales 1e-4..1e6 (need <= 1e-10); windowed EMA estimate max rel. " + fmt(worst_ema, 3) +
             " (reported only)";
  o.data = per;
  return o;
}

Outcome solver_correctness() {
  Outcome o;
  Rng rng(31);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst_q = 0.0;
  int policy_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + trial % 5;
    RewardTensor r(n);
    for (int s = 0; s < n; ++s)
      for (int a = 0; a < 2; ++a)
        for (int j = 0; j < n; ++j) r.at(s, a, j) = u(rng);
    const PolicySolution sol = solve_policy(r, 0.9);
    const Eigen::MatrixXd q = oracle::value_iteration(expected_rewards(r), 0.9);
    worst_q = std::max(worst_q, (sol.q.values - q).cwiseAbs().maxCoeff());
    policy_mismatch += !(sol.policy == greedy_policy(q));
  }

  // Replays a logged trajectory of the stationary run against plain running sums.
  const ExperimentConfig c = config("stationary");
  Agent agent(effective_agent(c), c.seed);
  const int n = static_cast<int>(c.agent.env.streams.size());
  std::map<std::tuple<int, int, int>, double> sums;
  std::int64_t count = 0, compared = 0;
  double worst_r = 0.0;
  while (!agent.done()) {
    const IterationRecord rec = agent.run_iteration();
    if (rec.froze) {
      sums.clear();
      count = 0;
    } else if (rec.rewarded) {
      sums[{rec.s, rec.a, rec.s_next}] += rec.reward;
      ++count;
    }
    if (count == 0) continue;
    for (int s = 0; s < n; ++s)
      for (int a = 0; a < 2; ++a)
        for (int j = 0; j < n; ++j) {
          const auto it = sums.find({s, a, j});
          const double mean = it == sums.end() ? 0.0 : it->second / count;
          worst_r = std::max(worst_r, std::abs(agent.reward_tensor()(s, a, j) - mean));
        }
    ++compared;
  }
  o.pass = worst_q <= 1e-6 && policy_mismatch == 0 && worst_r <= 1e-10;
  o.detail = "1000 random tensors (n = 2..6): max |Q - Q_vi| " + fmt(worst_q, 3) + ", policy mismatches " +
             std::to_string(policy_mismatch) + "; reward estimate vs running mean over " + std::to_string(compared) +
             " logged iterations: max abs error " + fmt(worst_r, 3);
  o.data = {{"max_q_error", worst_q}, {"policy_mismatch", policy_mismatch}, {"max_reward_error", worst_r},
            {"iterations", compared}};
  return o;
}

Outcome pixel_surrogate(const fs::path& out) {
  const ExperimentConfig c = config("pixel");
  const RunReport rep = run_experiment(c, {out / "pixel", 0, std::nullopt});
  const int matched = rep.summary["matched"].get<int>();
  std::map<std::string, int> streams;
  double best_corr = 0.0;
  for (const auto& t : rep.trials) {
    std::string key;
    for (int s : t.trained_streams) key += std::to_string(s);
    ++streams[key.empty() ? "-" : key];
    for (double r : t.latent_corr)
      if (!std::isnan(r)) best_corr = std::max(best_corr, std::abs(r));
  }
  std::string dist;
  for (const auto& [k, v] : streams) dist += (dist.empty() ? "" : ", ") + k + " x" + std::to_string(v);
  Outcome o;
  o.pass = matched == c.trials;
  o.detail = std::to_string(matched) + "/" + std::to_string(c.trials) +
             " trials learned exactly viewport 0 then viewport 2 with |corr| >= 0.8 (need all); trained viewports: " +
             dist + "; best |corr| " + fmt(best_corr, 3);
  o.data = {{"matched", matched}, {"trained_streams", streams}, {"abstraction_counts", rep.summary["abstraction_counts"]}};
  return o;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = os.str();
  }
  return out;
}

Outcome determinism(const fs::path& out) {
  auto run_all = [](const fs::path& dir, int jobs) {
    for (const char* name : {"stationary", "stability", "pixel"}) {
      ExperimentConfig c = config(name);
      c.trials = 2;
      c.trial_logs = true;
      run_experiment(c, {dir / name, 0, jobs});
    }
    ExperimentConfig c = config("nonstationary");
    c.trial_logs = true;
    c.trials_per_point = 2;
    SweepGrid g;
    g.epsilon_c = {0.9, 0.5};
    run_sweep(c, g, {dir / "nonstationary", 0, jobs});
  };
  const fs::path a = out / "determinism_a", b = out / "determinism_b";
  fs::remove_all(a);
  fs::remove_all(b);
  run_all(a, 1);
  run_all(b, 2);
  const auto ta = read_tree(a), tb = read_tree(b);
  int differ = 0;
  std::size_t bytes = 0;
  std::string first;
  std::set<std::string> names;
  for (const auto& [k, v] : ta) names.insert(k);
  for (const auto& [k, v] : tb) names.insert(k);
  for (const auto& k : names) {
    const auto ia = ta.find(k), ib = tb.find(k);
    if (ia == ta.end() || ib == tb.end() || ia->second != ib->second) {
      ++differ;
      if (first.empty()) first = k;
    } else {
      bytes += ia->second.size();
    }
  }
  Outcome o;
  o.pass = differ == 0 && !names.empty();
  o.detail = std::to_string(names.size()) + " files from two runs (1 and 2 worker threads), " + std::to_string(differ) +
             " differ" + (first.empty() ? "" : " (first: " + first + ")") + ", " + std::to_string(bytes) +
             " identical bytes";
  o.data = {{"files", names.size()}, {"differ", differ}};
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string out = "acceptance_out";
  std::vector<int> only;
  bool strict = false;
  app.add_option("--out", out, "directory for run outputs and acceptance.json");
  app.add_option("--only", only, "criterion numbers to run (default: all)")->delimiter(',');
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);
  const fs::path dir(out);
  fs::create_directories(dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"stationary ordering", [&] { return stationary_ordering(dir); }},
      {"epsilon_d vs sigma", [&] { return epsilon_d_vs_sigma(dir); }},
      {"epsilon_d insensitivity to nu and tau", [&] { return epsilon_d_insensitivity(dir); }},
      {"reward-rule stability", [&] { return stability_comparison(dir); }},
      {"incremental SFA fidelity", [] { return incsfa_fidelity(); }},
      {"slowness estimator fidelity", [] { return eta_fidelity(); }},
      {"solver and reward estimate", [] { return solver_correctness(); }},
      {"pixel surrogate", [&] { return pixel_surrogate(dir); }},
      {"determinism", [&] { return determinism(dir); }},
  };

  json report = json::array();
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto& [name, fn] = criteria[i];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      std::cerr << "criterion " << id << " (" << name << ") raised: " << e.what() << '\n';
      return 2;
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " [" << name << "]: " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
    report.push_back({{"criterion", id}, {"name", name}, {"pass", o.pass}, {"detail", o.detail}, {"data", o.data}});
  }
  std::ofstream(dir / "acceptance.json") << report.dump(2) << '\n';
  std::cout << (report.size() - failed) << "/" << report.size() << " criteria pass\n";
  return strict && failed > 0 ? 1 : 0;
}
