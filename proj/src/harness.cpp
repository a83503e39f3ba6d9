#include "cdmisfa/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>

extern char** environ;

namespace cdmisfa {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json num_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Reads one JSON object, remembering which keys were used so leftovers can
// be reported as unknown fields.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key), std::string("wrong type: ") + e.what());
    }
  }

  Reader sub(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return Reader(has(key) ? j_.at(key) : empty, field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

template <class E>
E parse_enum(const std::string& field, const std::string& v, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, e] : names)
    if (v == n) return e;
  std::string all;
  for (const auto& [n, e] : names) all += (all.empty() ? "" : "|") + std::string(n);
  throw ConfigError(field, "expected one of " + all + ", got '" + v + "'");
}

std::string law_name(MotionLaw l) {
  switch (l) {
    case MotionLaw::ToggleY: return "toggle-y";
    case MotionLaw::UniformRandom: return "uniform";
    case MotionLaw::RandomWalk: return "random-walk";
  }
  return "uniform";
}

BlobSceneParams parse_scene(const json& j, const std::string& path) {
  if (j.is_string()) {
    if (j.get<std::string>() != "default") throw ConfigError(path, "expected \"default\" or an object");
    return BlobSceneParams::defaults();
  }
  Reader r(j, path);
  BlobSceneParams d = BlobSceneParams::defaults();
  BlobSceneParams p;
  p.scene_width = r.get("scene_width", d.scene_width);
  p.height = r.get("height", d.height);
  p.viewport_width = r.get("viewport_width", d.viewport_width);
  p.viewport_offsets = r.get("viewport_offsets", d.viewport_offsets);
  p.radius = r.get("radius", d.radius);
  if (r.has("objects")) {
    const json& objs = r.raw("objects");
    if (!objs.is_array()) throw ConfigError(r.field("objects"), "expected an array");
    for (std::size_t i = 0; i < objs.size(); ++i) {
      Reader o(objs[i], r.field("objects") + "[" + std::to_string(i) + "]");
      BlobObject b;
      b.law = parse_enum<MotionLaw>(o.field("law"), o.get<std::string>("law", "uniform"),
                                    {{"toggle-y", MotionLaw::ToggleY},
                                     {"uniform", MotionLaw::UniformRandom},
                                     {"random-walk", MotionLaw::RandomWalk}});
      b.x_min = o.get("x_min", 0.0);
      b.x_max = o.get("x_max", 0.0);
      b.y_min = o.get("y_min", 0.0);
      b.y_max = o.get("y_max", 0.0);
      b.toggle_period = o.get("toggle_period", b.toggle_period);
      b.step_x = o.get("step_x", b.step_x);
      b.step_y = o.get("step_y", b.step_y);
      b.step_period = o.get("step_period", b.step_period);
      o.finish();
      p.objects.push_back(b);
    }
  } else {
    p.objects = d.objects;
  }
  r.finish();
  return p;
}

json scene_json(const BlobSceneParams& p) {
  json objs = json::array();
  for (const auto& b : p.objects)
    objs.push_back({{"law", law_name(b.law)},
                    {"x_min", b.x_min},
                    {"x_max", b.x_max},
                    {"y_min", b.y_min},
                    {"y_max", b.y_max},
                    {"toggle_period", b.toggle_period},
                    {"step_x", b.step_x},
                    {"step_y", b.step_y},
                    {"step_period", b.step_period}});
  return {{"scene_width", p.scene_width}, {"height", p.height},   {"viewport_width", p.viewport_width},
          {"viewport_offsets", p.viewport_offsets}, {"radius", p.radius}, {"objects", objs}};
}

StreamSpec parse_stream_at(const json& j, const std::string& path) {
  if (j.is_string()) {
    const std::string s = lower(j.get<std::string>());
    if (s == "x1" || s == "x2" || s == "x3") return OscStreamParams{parse_osc_family(s)};
    if (s == "zero") return NoiseStreamParams{2, 0.0, 0.0};
    if (s.rfind("viewport", 0) == 0 && s.size() > 8) {
      try {
        return ViewportStreamParams{std::stoi(s.substr(8))};
      } catch (const std::exception&) {
      }
    }
    throw ConfigError(path, "unknown stream '" + s + "'");
  }
  Reader r(j, path);
  const std::string type = r.get<std::string>("type", "");
  StreamSpec out;
  if (type == "osc") {
    const std::string fam = r.get<std::string>("family", "x1");
    try {
      out = OscStreamParams{parse_osc_family(fam)};
    } catch (const std::exception&) {
      throw ConfigError(r.field("family"), "expected x1|x2|x3, got '" + fam + "'");
    }
  } else if (type == "noise") {
    NoiseStreamParams n;
    n.dim = r.get("dim", n.dim);
    n.low = r.get("low", n.low);
    n.high = r.get("high", n.high);
    if (n.dim < 1) throw ConfigError(r.field("dim"), "must be >= 1");
    if (n.high < n.low) throw ConfigError(r.field("high"), "must be >= low");
    out = n;
  } else if (type == "viewport") {
    out = ViewportStreamParams{r.get("viewport", 0)};
  } else {
    throw ConfigError(r.field("type"), "expected osc|noise|viewport, got '" + type + "'");
  }
  r.finish();
  return out;
}

std::vector<double> doubles_from(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) throw ConfigError(path, "expected an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

SweepGrid parse_grid_json(const json& j, const std::string& path) {
  Reader r(j, path);
  SweepGrid g;
  if (r.has("epsilon_c")) g.epsilon_c = doubles_from(r.raw("epsilon_c"), r.field("epsilon_c"));
  if (r.has("sigma")) g.sigma = doubles_from(r.raw("sigma"), r.field("sigma"));
  if (r.has("nu")) g.nu = doubles_from(r.raw("nu"), r.field("nu"));
  if (r.has("tau")) {
    for (double t : doubles_from(r.raw("tau"), r.field("tau"))) {
      if (t != std::floor(t)) throw ConfigError(r.field("tau"), "tau values must be integers");
      g.tau.push_back(static_cast<int>(t));
    }
  }
  r.finish();
  return g;
}

SubPolicy policy_at(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path, "expected a string of 0/1 actions");
  try {
    return parse_policy(j.get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::Stationary: return "stationary";
    case Scenario::NonstationarySweep: return "nonstationary-sweep";
    case Scenario::StabilityCompare: return "stability-compare";
    case Scenario::PixelSurrogate: return "pixel-surrogate";
  }
  return "stationary";
}

Scenario parse_scenario(const std::string& name) {
  return parse_enum<Scenario>("scenario", name,
                              {{"stationary", Scenario::Stationary},
                               {"nonstationary-sweep", Scenario::NonstationarySweep},
                               {"stability-compare", Scenario::StabilityCompare},
                               {"pixel-surrogate", Scenario::PixelSurrogate}});
}

SubPolicy parse_policy(const std::string& s) {
  SubPolicy p;
  for (char c : s) {
    if (c != '0' && c != '1') throw std::invalid_argument("policy must be a string of 0/1, got '" + s + "'");
    p.actions.push_back(c - '0');
  }
  if (p.actions.empty()) throw std::invalid_argument("policy is empty");
  return p;
}

StreamSpec parse_stream_spec(const json& j) { return parse_stream_at(j, "stream"); }

json stream_spec_json(const StreamSpec& s) {
  if (const auto* o = std::get_if<OscStreamParams>(&s)) return {{"type", "osc"}, {"family", to_string(o->family)}};
  if (const auto* n = std::get_if<NoiseStreamParams>(&s))
    return {{"type", "noise"}, {"dim", n->dim}, {"low", n->low}, {"high", n->high}};
  return {{"type", "viewport"}, {"viewport", std::get<ViewportStreamParams>(s).viewport}};
}

SweepGrid parse_grid(const std::string& text) {
  std::string t = text;
  t.erase(0, t.find_first_not_of(" \t\n"));
  if (!t.empty() && t.front() == '{') {
    json j;
    try {
      j = json::parse(t);
    } catch (const json::exception& e) {
      throw ConfigError("grid", std::string("invalid JSON: ") + e.what());
    }
    return parse_grid_json(j, "grid");
  }
  json j = json::object();
  std::stringstream parts(t);
  std::string part;
  while (std::getline(parts, part, ';')) {
    if (part.find_first_not_of(" \t") == std::string::npos) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid", "expected key=v1,v2 in '" + part + "'");
    std::string key = part.substr(0, eq);
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t") + 1);
    json vals = json::array();
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (v.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(v);
        vals.push_back(d);
      } catch (const std::exception&) {
        throw ConfigError("grid." + key, "not a number: '" + v + "'");
      }
    }
    j[key] = vals;
  }
  return parse_grid_json(j, "grid");
}

json to_json(const SweepGrid& g) {
  json j = json::object();
  if (!g.epsilon_c.empty()) j["epsilon_c"] = g.epsilon_c;
  if (!g.sigma.empty()) j["sigma"] = g.sigma;
  if (!g.nu.empty()) j["nu"] = g.nu;
  if (!g.tau.empty()) j["tau"] = g.tau;
  return j;
}

ExperimentConfig parse_config(const json& j) {
  Reader r(j, "");
  ExperimentConfig c;
  if (!r.has("scenario")) throw ConfigError("scenario", "missing");
  c.scenario = parse_scenario(r.get<std::string>("scenario", ""));
  c.trials = r.get("trials", c.trials);
  c.seed = r.get("seed", c.seed);
  c.jobs = r.get("jobs", c.jobs);
  c.output_dir = r.get("output_dir", c.output_dir);
  c.trial_logs = r.get("trial_logs", c.trial_logs);

  AgentConfig& a = c.agent;
  {
    Reader ar = r.sub("agent");
    a.budget = ar.get("budget", a.budget);
    a.patience = ar.get("patience", a.patience);
    a.max_abstractions = ar.get("max_abstractions", a.max_abstractions);
    a.discount = ar.get("discount", a.discount);
    a.eval_batches = ar.get("eval_batches", a.eval_batches);
    a.skip_constant_batches = ar.get("skip_constant_batches", a.skip_constant_batches);
    a.reset_reward_on_freeze = ar.get("reset_reward_on_freeze", a.reset_reward_on_freeze);
    ar.finish();
  }
  {
    Reader er = r.sub("env");
    a.env.tau = er.get("tau", a.env.tau);
    a.env.clock = parse_enum<ClockMode>(er.field("clock"), er.get<std::string>("clock", "observed"),
                                        {{"observed", ClockMode::Observed}, {"global", ClockMode::Global}});
    a.env.initial_stream = er.get("initial_stream", -1);
    if (er.has("scene")) a.env.scene = parse_scene(er.raw("scene"), er.field("scene"));
    if (!er.has("streams")) throw ConfigError(er.field("streams"), "missing");
    const json& streams = er.raw("streams");
    if (!streams.is_array()) throw ConfigError(er.field("streams"), "expected an array");
    for (std::size_t i = 0; i < streams.size(); ++i)
      a.env.streams.push_back(parse_stream_at(streams[i], er.field("streams") + "[" + std::to_string(i) + "]"));
    er.finish();
  }
  {
    Reader ir = r.sub("incsfa");
    IncSfaParams& p = a.incsfa;
    p.output_dim = ir.get("output_dim", p.output_dim);
    p.max_rank = ir.get("max_rank", p.max_rank);
    p.learning_rate = ir.get("nu", p.learning_rate);
    p.lateral_inhibition = ir.get("lateral_inhibition", p.lateral_inhibition);
    p.amnesic = ir.get("amnesic", p.amnesic);
    p.amnesic_start = ir.get("amnesic_start", p.amnesic_start);
    p.amnesic_r = ir.get("amnesic_r", p.amnesic_r);
    p.amnesic_ramp_end = ir.get("amnesic_ramp_end", p.amnesic_ramp_end);
    p.warmup = ir.get("warmup", p.warmup);
    p.eigen_floor = ir.get("eigen_floor", p.eigen_floor);
    p.derivative_rate = ir.get("derivative_rate", p.derivative_rate);
    p.normalize_step = ir.get("normalize_step", p.normalize_step);
    ir.finish();
  }
  {
    Reader gr = r.sub("gating");
    GatingParams& g = a.gating;
    g.ema_rate = gr.get("ema_rate", g.ema_rate);
    g.ema_stages = gr.get("ema_stages", g.ema_stages);
    g.inst_window = gr.get("inst_window", g.inst_window);
    g.inst_rate = gr.get("inst_rate", g.inst_rate);
    g.delta = gr.get("delta", g.delta);
    g.settle_batches = gr.get("settle_batches", g.settle_batches);
    g.sd_floor = gr.get("sd_floor", g.sd_floor);
    g.var_floor = gr.get("var_floor", g.var_floor);
    g.band_width = gr.get("band_width", g.band_width);
    g.rescore_band = gr.get("rescore_band", g.rescore_band);
    g.eta_ceiling = gr.get("eta_ceiling", g.eta_ceiling);
    g.settle_single_stream = gr.get("settle_single_stream", g.settle_single_stream);
    gr.finish();
  }
  {
    Reader rr = r.sub("reward");
    if (rr.has("beta")) {
      const json& b = rr.raw("beta");
      if (b.is_string() && b.get<std::string>() == "auto") {
        c.beta_auto = true;
      } else if (b.is_number()) {
        c.beta_auto = false;
        a.reward.beta = b.get<double>();
      } else {
        throw ConfigError(rr.field("beta"), "expected a number or \"auto\"");
      }
    }
    a.reward.sigma = rr.get("sigma", a.reward.sigma);
    a.rule = parse_enum<RewardRule>(rr.field("rule"), rr.get<std::string>("rule", "averaged"),
                                    {{"averaged", RewardRule::Averaged}, {"legacy", RewardRule::Legacy}});
    a.legacy_alpha = rr.get("legacy_alpha", a.legacy_alpha);
    a.filtered_reward =
        parse_enum<FilteredReward>(rr.field("filtered"), rr.get<std::string>("filtered", "zero"),
                                   {{"zero", FilteredReward::Zero}, {"xi-zero", FilteredReward::XiZero}});
    rr.finish();
  }
  {
    Reader xr = r.sub("epsilon");
    a.epsilon.initial = xr.get("initial", a.epsilon.initial);
    a.epsilon.multiplier = xr.get("multiplier", a.epsilon.multiplier);
    if (xr.has("stages")) {
      const json& st = xr.raw("stages");
      if (!st.is_array()) throw ConfigError(xr.field("stages"), "expected an array");
      a.epsilon.stages.clear();
      for (std::size_t i = 0; i < st.size(); ++i) {
        Reader sr(st[i], xr.field("stages") + "[" + std::to_string(i) + "]");
        EpsilonSchedule::Stage s;
        s.below = sr.get("below", s.below);
        s.multiplier = sr.get("multiplier", s.multiplier);
        s.hard_zero = sr.get("hard_zero", s.hard_zero);
        sr.finish();
        a.epsilon.stages.push_back(s);
      }
    }
    xr.finish();
  }
  if (r.has("swap")) {
    Reader sr = r.sub("swap");
    SwapSchedule s;
    s.epsilon_c = sr.get("epsilon_c", s.epsilon_c);
    s.target = sr.get("target", s.target);
    if (sr.has("replacement")) s.replacement = parse_stream_at(sr.raw("replacement"), sr.field("replacement"));
    sr.finish();
    a.swap = s;
  } else {
    r.get<json>("swap", nullptr);
  }
  {
    Reader cr = r.sub("classify");
    c.expected_streams = cr.get("streams", c.expected_streams);
    if (cr.has("policies")) {
      const json& ps = cr.raw("policies");
      if (!ps.is_array()) throw ConfigError(cr.field("policies"), "expected an array");
      for (std::size_t i = 0; i < ps.size(); ++i)
        c.expected_policies.push_back(policy_at(ps[i], cr.field("policies") + "[" + std::to_string(i) + "]"));
    }
    c.latent_columns = cr.get("latent_columns", c.latent_columns);
    c.min_latent_corr = cr.get("min_latent_corr", c.min_latent_corr);
    c.eval_batches = cr.get("eval_batches", c.eval_batches);
    cr.finish();
  }
  {
    Reader wr = r.sub("sweep");
    SweepGrid g;
    if (wr.has("epsilon_c")) g.epsilon_c = doubles_from(wr.raw("epsilon_c"), wr.field("epsilon_c"));
    if (wr.has("grid")) {
      const SweepGrid extra = parse_grid_json(wr.raw("grid"), wr.field("grid"));
      g.sigma = extra.sigma;
      g.nu = extra.nu;
      g.tau = extra.tau;
      if (!extra.epsilon_c.empty()) throw ConfigError(wr.field("grid.epsilon_c"), "set sweep.epsilon_c instead");
    }
    c.grid = g;
    c.trials_per_point = wr.get("trials_per_point", c.trials_per_point);
    if (wr.has("old_policy")) c.old_policy = policy_at(wr.raw("old_policy"), wr.field("old_policy"));
    if (wr.has("new_policy")) c.new_policy = policy_at(wr.raw("new_policy"), wr.field("new_policy"));
    c.stop_epsilon = wr.get("stop_epsilon", c.stop_epsilon);
    wr.finish();
  }
  r.finish();
  validate(c);
  return c;
}

void validate(const ExperimentConfig& c) {
  const AgentConfig& a = c.agent;
  const int n = static_cast<int>(a.env.streams.size());
  if (n < 2) throw ConfigError("env.streams", "need at least 2 streams");
  if (a.env.tau < 2) throw ConfigError("env.tau", "must be >= 2");
  if (a.env.initial_stream >= n) throw ConfigError("env.initial_stream", "out of range");
  if (c.trials < 1) throw ConfigError("trials", "must be >= 1");
  if (c.jobs < 1) throw ConfigError("jobs", "must be >= 1");
  if (a.budget < 1) throw ConfigError("agent.budget", "must be >= 1");
  if (a.patience < 1) throw ConfigError("agent.patience", "must be >= 1");
  if (a.max_abstractions < 0) throw ConfigError("agent.max_abstractions", "must be >= 0");
  if (!(a.discount >= 0.0 && a.discount < 1.0)) throw ConfigError("agent.discount", "must be in [0, 1)");
  if (a.eval_batches < 0) throw ConfigError("agent.eval_batches", "must be >= 0");

  std::optional<int> dim;
  auto check_stream = [&](const StreamSpec& s, const std::string& field) {
    if (const auto* v = std::get_if<ViewportStreamParams>(&s)) {
      if (!a.env.scene) throw ConfigError(field, "viewport stream needs env.scene");
      if (v->viewport < 0 || v->viewport >= a.env.scene->num_viewports())
        throw ConfigError(field, "viewport index out of range");
    }
    const int d = spec_dim(s, a.env.scene);
    if (dim && d != *dim) throw ConfigError(field, "input dimension " + std::to_string(d) + " differs from " +
                                                       std::to_string(*dim));
    dim = d;
  };
  for (int i = 0; i < n; ++i) check_stream(a.env.streams[i], "env.streams[" + std::to_string(i) + "]");
  if (a.env.scene) {
    const auto& p = *a.env.scene;
    if (p.height < 1 || p.viewport_width < 1 || p.scene_width < p.viewport_width)
      throw ConfigError("env.scene", "bad geometry");
    for (int off : p.viewport_offsets)
      if (off < 0 || off + p.viewport_width > p.scene_width)
        throw ConfigError("env.scene.viewport_offsets", "viewport outside the scene");
    if (!(p.radius >= 0.0)) throw ConfigError("env.scene.radius", "must be >= 0");
  }

  const IncSfaParams& p = a.incsfa;
  if (p.output_dim < 1) throw ConfigError("incsfa.output_dim", "must be >= 1");
  if (p.max_rank < 0) throw ConfigError("incsfa.max_rank", "must be >= 0");
  if (p.max_rank > 0 && p.output_dim > p.max_rank) throw ConfigError("incsfa.output_dim", "exceeds max_rank");
  if (dim && p.output_dim > *dim) throw ConfigError("incsfa.output_dim", "exceeds the input dimension");
  if (!(p.learning_rate > 0.0)) throw ConfigError("incsfa.nu", "must be > 0");
  if (p.amnesic < 0.0) throw ConfigError("incsfa.amnesic", "must be >= 0");
  if (p.amnesic_start < 1) throw ConfigError("incsfa.amnesic_start", "must be >= 1");
  if (p.amnesic_r < 0.0) throw ConfigError("incsfa.amnesic_r", "must be >= 0");
  if (p.warmup < 1) throw ConfigError("incsfa.warmup", "must be >= 1");
  if (!(p.derivative_rate >= 0.0 && p.derivative_rate <= 1.0))
    throw ConfigError("incsfa.derivative_rate", "must be in [0, 1]");

  const GatingParams& g = a.gating;
  if (!(g.delta > 0.0)) throw ConfigError("gating.delta", "must be > 0");
  if (!(g.ema_rate > 0.0 && g.ema_rate <= 1.0)) throw ConfigError("gating.ema_rate", "must be in (0, 1]");
  if (g.ema_stages < 1) throw ConfigError("gating.ema_stages", "must be >= 1");
  if (g.inst_window < 0) throw ConfigError("gating.inst_window", "must be >= 0");
  if (g.settle_batches < 1) throw ConfigError("gating.settle_batches", "must be >= 1");
  if (!(g.sd_floor > 0.0)) throw ConfigError("gating.sd_floor", "must be > 0");
  if (!(g.band_width > 0.0)) throw ConfigError("gating.band_width", "must be > 0");

  if (!(a.reward.sigma >= 0.0)) throw ConfigError("reward.sigma", "must be >= 0");
  if (!std::isfinite(a.reward.beta)) throw ConfigError("reward.beta", "must be finite");
  if (!(a.legacy_alpha > 0.0 && a.legacy_alpha <= 1.0)) throw ConfigError("reward.legacy_alpha", "must be in (0, 1]");

  if (a.epsilon.initial < 0.0) throw ConfigError("epsilon.initial", "must be >= 0");
  if (!(a.epsilon.multiplier >= 0.0 && a.epsilon.multiplier <= 1.0))
    throw ConfigError("epsilon.multiplier", "must be in [0, 1]");
  for (std::size_t i = 0; i < a.epsilon.stages.size(); ++i) {
    const auto& s = a.epsilon.stages[i];
    if (!(s.multiplier >= 0.0 && s.multiplier <= 1.0))
      throw ConfigError("epsilon.stages[" + std::to_string(i) + "].multiplier", "must be in [0, 1]");
  }

  if (a.swap) {
    if (a.swap->target < 0 || a.swap->target >= n) throw ConfigError("swap.target", "out of range");
    check_stream(a.swap->replacement, "swap.replacement");
  }
  if (c.scenario == Scenario::NonstationarySweep) {
    if (!a.swap) throw ConfigError("swap", "nonstationary-sweep needs a swap schedule");
    if (c.grid.epsilon_c.empty()) throw ConfigError("sweep.epsilon_c", "nonstationary-sweep needs a grid");
    if (c.old_policy.size() != n) throw ConfigError("sweep.old_policy", "needs one action per stream");
    if (c.new_policy.size() != n) throw ConfigError("sweep.new_policy", "needs one action per stream");
  }
  if (c.trials_per_point < 1) throw ConfigError("sweep.trials_per_point", "must be >= 1");
  if (!(c.stop_epsilon > 0.0)) throw ConfigError("sweep.stop_epsilon", "must be > 0");
  for (double e : c.grid.epsilon_c)
    if (!(e >= 0.0)) throw ConfigError("sweep.epsilon_c", "values must be >= 0");
  for (double s : c.grid.sigma)
    if (!(s >= 0.0)) throw ConfigError("sweep.grid.sigma", "values must be >= 0");
  for (double v : c.grid.nu)
    if (!(v > 0.0)) throw ConfigError("sweep.grid.nu", "values must be > 0");
  for (int t : c.grid.tau)
    if (t < 2) throw ConfigError("sweep.grid.tau", "values must be >= 2");

  for (std::size_t i = 0; i < c.expected_streams.size(); ++i)
    if (c.expected_streams[i] < 0 || c.expected_streams[i] >= n)
      throw ConfigError("classify.streams[" + std::to_string(i) + "]", "out of range");
  for (std::size_t i = 0; i < c.expected_policies.size(); ++i)
    if (c.expected_policies[i].size() != n)
      throw ConfigError("classify.policies[" + std::to_string(i) + "]", "needs one action per stream");
  if (!c.latent_columns.empty() && static_cast<int>(c.latent_columns.size()) != n)
    throw ConfigError("classify.latent_columns", "needs one entry per stream");
  if (c.eval_batches < 1) throw ConfigError("classify.eval_batches", "must be >= 1");
}

json to_json(const ExperimentConfig& c) {
  const AgentConfig& a = c.agent;
  json j;
  j["scenario"] = to_string(c.scenario);
  j["trials"] = c.trials;
  j["seed"] = c.seed;
  j["jobs"] = c.jobs;
  j["output_dir"] = c.output_dir;
  j["trial_logs"] = c.trial_logs;
  j["agent"] = {{"budget", a.budget},
                {"patience", a.patience},
                {"max_abstractions", a.max_abstractions},
                {"discount", a.discount},
                {"eval_batches", a.eval_batches},
                {"skip_constant_batches", a.skip_constant_batches},
                {"reset_reward_on_freeze", a.reset_reward_on_freeze}};
  json streams = json::array();
  for (const auto& s : a.env.streams) streams.push_back(stream_spec_json(s));
  j["env"] = {{"tau", a.env.tau},
              {"clock", a.env.clock == ClockMode::Global ? "global" : "observed"},
              {"initial_stream", a.env.initial_stream},
              {"streams", streams}};
  if (a.env.scene) j["env"]["scene"] = scene_json(*a.env.scene);
  const IncSfaParams& p = a.incsfa;
  j["incsfa"] = {{"output_dim", p.output_dim},
                 {"max_rank", p.max_rank},
                 {"nu", p.learning_rate},
                 {"lateral_inhibition", p.lateral_inhibition},
                 {"amnesic", p.amnesic},
                 {"amnesic_start", p.amnesic_start},
                 {"amnesic_r", p.amnesic_r},
                 {"amnesic_ramp_end", p.amnesic_ramp_end},
                 {"warmup", p.warmup},
                 {"eigen_floor", p.eigen_floor},
                 {"derivative_rate", p.derivative_rate},
                 {"normalize_step", p.normalize_step}};
  const GatingParams& g = a.gating;
  j["gating"] = {{"ema_rate", g.ema_rate},
                 {"ema_stages", g.ema_stages},
                 {"inst_window", g.inst_window},
                 {"inst_rate", g.inst_rate},
                 {"delta", g.delta},
                 {"settle_batches", g.settle_batches},
                 {"sd_floor", g.sd_floor},
                 {"var_floor", g.var_floor},
                 {"band_width", g.band_width},
                 {"rescore_band", g.rescore_band},
                 {"eta_ceiling", g.eta_ceiling},
                 {"settle_single_stream", g.settle_single_stream}};
  j["reward"] = {{"beta", c.beta_auto ? json("auto") : json(a.reward.beta)},
                 {"sigma", a.reward.sigma},
                 {"rule", a.rule == RewardRule::Legacy ? "legacy" : "averaged"},
                 {"legacy_alpha", a.legacy_alpha},
                 {"filtered", a.filtered_reward == FilteredReward::XiZero ? "xi-zero" : "zero"}};
  json stages = json::array();
  for (const auto& s : a.epsilon.stages)
    stages.push_back({{"below", s.below}, {"multiplier", s.multiplier}, {"hard_zero", s.hard_zero}});
  j["epsilon"] = {{"initial", a.epsilon.initial}, {"multiplier", a.epsilon.multiplier}, {"stages", stages}};
  if (a.swap)
    j["swap"] = {{"epsilon_c", a.swap->epsilon_c},
                 {"target", a.swap->target},
                 {"replacement", stream_spec_json(a.swap->replacement)}};
  json policies = json::array();
  for (const auto& pol : c.expected_policies) policies.push_back(pol.to_string());
  j["classify"] = {{"streams", c.expected_streams},
                   {"policies", policies},
                   {"latent_columns", c.latent_columns},
                   {"min_latent_corr", c.min_latent_corr},
                   {"eval_batches", c.eval_batches}};
  SweepGrid extra = c.grid;
  extra.epsilon_c.clear();
  j["sweep"] = {{"epsilon_c", c.grid.epsilon_c},
                {"grid", to_json(extra)},
                {"trials_per_point", c.trials_per_point},
                {"old_policy", c.old_policy.to_string()},
                {"new_policy", c.new_policy.to_string()},
                {"stop_epsilon", c.stop_epsilon}};
  return j;
}

void apply_env_overrides(json& j, const std::map<std::string, std::string>& env) {
  for (const auto& [key, value] : env) {
    std::vector<std::string> path;
    std::string k = lower(key);
    for (std::size_t pos = 0;;) {
      const auto next = k.find("__", pos);
      path.push_back(k.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    json* node = &j;
    std::string field;
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      field += (i ? "." : "") + path[i];
      json& child = (*node)[path[i]];
      if (child.is_null()) child = json::object();
      if (!child.is_object()) throw ConfigError(field, "override needs an object here");
      node = &child;
    }
    json parsed;
    try {
      parsed = json::parse(value);
    } catch (const json::exception&) {
      parsed = value;
    }
    (*node)[path.back()] = parsed;
  }
}

std::map<std::string, std::string> environment_with_prefix(const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq == std::string::npos || kv.compare(0, prefix.size(), prefix) != 0) continue;
    out[kv.substr(prefix.size(), eq - prefix.size())] = kv.substr(eq + 1);
  }
  return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigNotFound(path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  apply_env_overrides(j, environment_with_prefix());
  return parse_config(j);
}

AgentConfig effective_agent(const ExperimentConfig& c) {
  AgentConfig a = c.agent;
  if (c.beta_auto) a.reward.beta = default_beta(a.incsfa.learning_rate, static_cast<int>(a.env.streams.size()));
  return a;
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

TrialLog::TrialLog(std::ostream& out, int components, int streams)
    : out_(out), components_(components), streams_(streams) {
  out_ << "iteration,u,s,a,s_next,epsilon,novel,constant,rewarded,reward,xi_mean,xi_dot";
  for (int c = 1; c <= components_; ++c) out_ << ",eta_" << c;
  for (int c = 1; c <= components_; ++c) out_ << ",eta_dot_" << c;
  out_ << ",policy";
  for (int s = 0; s < streams_; ++s) out_ << ",q_" << s << "_stay,q_" << s << "_switch";
  for (int s = 0; s < streams_; ++s) out_ << ",r_" << s << "_stay,r_" << s << "_switch";
  out_ << ",froze,swapped\n";
}

void TrialLog::write(const IterationRecord& r) {
  out_ << r.iteration << ',' << r.u << ',' << r.s << ',' << r.a << ',' << r.s_next << ',' << num(r.epsilon) << ','
       << r.novel << ',' << r.constant << ',' << r.rewarded << ',' << num(r.reward) << ',' << num(r.xi_mean) << ','
       << num(r.xi_dot);
  for (int c = 0; c < components_; ++c) out_ << ',' << (c < r.eta.size() ? num(r.eta(c)) : "");
  for (int c = 0; c < components_; ++c) out_ << ',' << (c < r.eta_dot.size() ? num(r.eta_dot(c)) : "");
  out_ << ',' << r.policy.to_string();
  for (int s = 0; s < streams_; ++s)
    for (int a = 0; a < kNumActions; ++a)
      out_ << ',' << (s < r.q.rows() && a < r.q.cols() ? num(r.q(s, a)) : "");
  for (int s = 0; s < streams_; ++s)
    for (int a = 0; a < kNumActions; ++a)
      out_ << ',' << (s < r.expected_reward.rows() ? num(r.expected_reward(s, a)) : "");
  out_ << ',' << r.froze << ',' << r.swapped << '\n';
}

json freeze_event_json(const FreezeEvent& ev) {
  return {{"iteration", ev.iteration},
          {"u", ev.u},
          {"trained_stream", ev.trained_stream},
          {"final_eta", vec_json(ev.final_eta)},
          {"stored_mean", vec_json(ev.stored_mean)},
          {"stored_sd", vec_json(ev.stored_sd)},
          {"policy", ev.policy.to_string()}};
}

json to_json(const TrialSummary& t) {
  json j;
  j["seed"] = t.seed;
  if (!t.variant.empty()) j["variant"] = t.variant;
  json pols = json::array();
  for (const auto& p : t.policies) pols.push_back(p.to_string());
  j["policies"] = pols;
  j["abstraction_count"] = t.abstraction_count;
  j["iterations_to_freeze"] = t.iterations_to_freeze;
  json etas = json::array();
  for (const auto& e : t.final_eta) etas.push_back(vec_json(e));
  j["final_eta"] = etas;
  j["trained_streams"] = t.trained_streams;
  if (!t.latent_corr.empty()) {
    json lc = json::array();
    for (double v : t.latent_corr) lc.push_back(num_json(v));
    j["latent_corr"] = lc;
  }
  j["termination"] = t.termination;
  j["iterations"] = t.iterations;
  if (!t.variant.empty()) {
    j["flips"] = t.flips;
    j["reached_zero"] = t.reached_zero;
  }
  j["epsilon_c"] = t.epsilon_c;
  j["outcome"] = t.outcome;
  return j;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

namespace {

struct TrialFiles {
  std::optional<std::ofstream> log;
  std::optional<std::ofstream> freezes;
  std::optional<TrialLog> writer;

  TrialFiles(const RunOptions& opt, bool logs, const std::string& stem, int components, int streams) {
    if (!opt.out) return;
    freezes.emplace(*opt.out / ("freezes_" + stem + ".jsonl"));
    if (!logs) return;
    log.emplace(*opt.out / ("trial_" + stem + ".csv"));
    writer.emplace(*log, components, streams);
  }
  void record(const IterationRecord& r) {
    if (writer) writer->write(r);
  }
  void freeze(const FreezeEvent& ev) {
    if (freezes) *freezes << freeze_event_json(ev).dump() << '\n';
  }
};

void write_json(const std::filesystem::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

void fill_learned(TrialSummary& t, const LearnedResult& res) {
  t.policies = res.policies;
  t.abstraction_count = res.library.size();
  t.iterations_to_freeze = res.iterations_to_freeze;
  t.final_eta = res.final_eta;
  for (const auto& f : res.library) t.trained_streams.push_back(f.provenance().trained_stream);
  t.termination = to_string(res.termination);
  t.iterations = res.iterations;
}

bool matches_expected(const ExperimentConfig& c, const TrialSummary& t) {
  if (!c.expected_streams.empty() && t.trained_streams != c.expected_streams) return false;
  if (!c.expected_policies.empty() && t.policies != c.expected_policies) return false;
  for (double v : t.latent_corr)
    if (!(std::abs(v) >= c.min_latent_corr)) return false;
  return true;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

// Per abstraction index: mean/SD over trials of the freeze iteration.
json freeze_aggregates(const std::vector<TrialSummary>& trials) {
  json out = json::array();
  for (std::size_t u = 0;; ++u) {
    std::vector<double> its;
    for (const auto& t : trials)
      if (u < t.iterations_to_freeze.size()) its.push_back(static_cast<double>(t.iterations_to_freeze[u]));
    if (its.empty()) break;
    const auto [m, s] = mean_sd(its);
    out.push_back({{"u", u + 1}, {"trials", its.size()}, {"iteration_mean", num_json(m)}, {"iteration_sd", num_json(s)}});
  }
  return out;
}

double latent_corr_on(const FrozenAbstraction& f, const EnvConfig& env, int stream, int column, int batches,
                      std::uint64_t seed) {
  EnvConfig ec = env;
  ec.initial_stream = stream;
  Environment probe(ec, seed);
  std::vector<double> out, lat;
  for (int b = 0; b < batches; ++b) {
    const ObservationBatch batch = probe.peek_batch(StreamId{stream});
    if (!batch.latents || column >= batch.latents->cols()) return std::numeric_limits<double>::quiet_NaN();
    const Eigen::MatrixXd y = f.outputs(batch.samples);
    for (int r = 0; r < y.rows(); ++r) {
      out.push_back(y(r, 0));
      lat.push_back((*batch.latents)(r, column));
    }
  }
  return correlation(Eigen::Map<Eigen::VectorXd>(out.data(), out.size()),
                     Eigen::Map<Eigen::VectorXd>(lat.data(), lat.size()));
}

TrialSummary learn_trial(const ExperimentConfig& c, const AgentConfig& a, std::uint64_t seed, const RunOptions& opt) {
  TrialFiles files(opt, c.trial_logs, std::to_string(seed), a.incsfa.output_dim, static_cast<int>(a.env.streams.size()));
  const LearnedResult res = run_trial(
      a, seed, [&](const IterationRecord& r) { files.record(r); }, [&](const FreezeEvent& ev) { files.freeze(ev); });
  TrialSummary t;
  t.seed = seed;
  fill_learned(t, res);
  if (!c.latent_columns.empty()) {
    for (int k = 0; k < res.library.size(); ++k) {
      const int tr = res.library[k].provenance().trained_stream;
      const int col = tr >= 0 ? c.latent_columns[tr] : -1;
      t.latent_corr.push_back(col < 0 ? std::numeric_limits<double>::quiet_NaN()
                                      : latent_corr_on(res.library[k], a.env, tr, col, c.eval_batches, seed + 7919));
    }
  }
  t.outcome = matches_expected(c, t) ? "match" : "mismatch";
  if (opt.out) write_json(*opt.out / ("library_" + std::to_string(seed) + ".json"), res.library.to_json());
  return t;
}

}  // namespace

TrialSummary run_stability_trial(const AgentConfig& config, std::uint64_t seed, std::ostream* log) {
  Agent agent(config, seed);
  std::optional<TrialLog> writer;
  if (log) writer.emplace(*log, config.incsfa.output_dim, static_cast<int>(config.env.streams.size()));
  TrialSummary t;
  t.seed = seed;
  t.variant = config.rule == RewardRule::Legacy ? "legacy" : "averaged";
  SubPolicy last;
  while (!agent.done()) {
    const IterationRecord r = agent.run_iteration();
    if (writer) writer->write(r);
    if (r.froze) break;
    if (t.reached_zero && r.policy != last) ++t.flips;
    if (r.epsilon == 0.0) t.reached_zero = true;
    last = r.policy;
  }
  const LearnedResult res = agent.result();
  fill_learned(t, res);
  t.outcome = t.flips > 0 ? "flipped" : "stable";
  return t;
}

RunReport run_experiment(const ExperimentConfig& c, const RunOptions& opt) {
  if (opt.out) std::filesystem::create_directories(*opt.out);
  const int jobs = opt.jobs.value_or(c.jobs);
  const AgentConfig a = effective_agent(c);
  RunReport rep;
  json summary;
  summary["scenario"] = to_string(c.scenario);
  summary["config"] = to_json(c);
  summary["beta"] = a.reward.beta;
  summary["seed_offset"] = opt.seed_offset;

  if (c.scenario == Scenario::NonstationarySweep) {
    SweepReport sw = run_sweep(c, SweepGrid{c.grid.epsilon_c, {}, {}, {}}, opt);
    rep.trials = std::move(sw.trials);
    rep.summary = std::move(sw.summary);
    return rep;
  }

  if (c.scenario == Scenario::StabilityCompare) {
    rep.trials.resize(2 * static_cast<std::size_t>(c.trials));
    parallel_for(2 * c.trials, jobs, [&](int i) {
      AgentConfig v = a;
      v.rule = i % 2 == 0 ? RewardRule::Averaged : RewardRule::Legacy;
      const std::uint64_t seed = c.seed + opt.seed_offset + static_cast<std::uint64_t>(i / 2);
      std::optional<std::ofstream> log;
      if (opt.out && c.trial_logs)
        log.emplace(*opt.out / ("trial_" + std::to_string(seed) + "_" + (i % 2 == 0 ? "averaged" : "legacy") + ".csv"));
      rep.trials[i] = run_stability_trial(v, seed, log ? &*log : nullptr);
    });
    int averaged_stable = 0, legacy_flipped = 0;
    for (const auto& t : rep.trials) {
      if (t.variant == "averaged" && t.flips == 0) ++averaged_stable;
      if (t.variant == "legacy" && t.flips > 0) ++legacy_flipped;
    }
    summary["averaged_no_flip"] = averaged_stable;
    summary["legacy_flipped"] = legacy_flipped;
  } else {
    rep.trials.resize(c.trials);
    parallel_for(c.trials, jobs, [&](int i) {
      rep.trials[i] = learn_trial(c, a, c.seed + opt.seed_offset + static_cast<std::uint64_t>(i), opt);
    });
    int matched = 0;
    std::map<std::string, int> by_count;
    for (const auto& t : rep.trials) {
      matched += t.outcome == "match";
      ++by_count[std::to_string(t.abstraction_count)];
    }
    summary["matched"] = matched;
    summary["abstraction_counts"] = by_count;
    summary["freezes"] = freeze_aggregates(rep.trials);
  }
  summary["trial_count"] = rep.trials.size();
  json trials = json::array();
  for (const auto& t : rep.trials) trials.push_back(to_json(t));
  summary["trials"] = trials;
  if (opt.out) write_json(*opt.out / "summary.json", summary);
  rep.summary = std::move(summary);
  return rep;
}

SweepReport run_sweep(const ExperimentConfig& c, const SweepGrid& grid, const RunOptions& opt) {
  if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
  if (!c.agent.swap) throw std::invalid_argument("sweep needs a swap schedule");
  const std::vector<double> eps = grid.epsilon_c.empty() ? c.grid.epsilon_c : grid.epsilon_c;
  if (eps.empty()) throw std::invalid_argument("sweep needs an epsilon_c grid");
  const std::vector<double> sigmas = grid.sigma.empty() ? std::vector<double>{c.agent.reward.sigma} : grid.sigma;
  const std::vector<double> nus = grid.nu.empty() ? std::vector<double>{c.agent.incsfa.learning_rate} : grid.nu;
  const std::vector<int> taus = grid.tau.empty() ? std::vector<int>{c.agent.env.tau} : grid.tau;
  if (opt.out) std::filesystem::create_directories(*opt.out);

  SweepReport rep;
  std::vector<AgentConfig> configs;
  for (double s : sigmas)
    for (double v : nus)
      for (int t : taus) {
        ExperimentConfig pc = c;
        pc.agent.reward.sigma = s;
        pc.agent.incsfa.learning_rate = v;
        pc.agent.env.tau = t;
        configs.push_back(effective_agent(pc));
        rep.points.push_back({s, v, t, {}});
      }

  EpsilonDOptions eo;
  eo.old_policy = c.old_policy;
  eo.new_policy = c.new_policy;
  eo.stop_epsilon = c.stop_epsilon;
  const int per_point = static_cast<int>(eps.size()) * c.trials_per_point;
  const int total = static_cast<int>(configs.size()) * per_point;
  std::vector<SweepTrial> trials(total);
  parallel_for(total, opt.jobs.value_or(c.jobs), [&](int i) {
    const int point = i / per_point;
    const int within = i % per_point;
    const double ec = eps[within / c.trials_per_point];
    const std::uint64_t seed = c.seed + opt.seed_offset + static_cast<std::uint64_t>(within % c.trials_per_point);
    const AgentConfig& a = configs[point];
    std::optional<TrialFiles> files;
    if (opt.out && c.trial_logs)
      files.emplace(opt, true,
                    std::to_string(seed) + "_p" + std::to_string(point) + "_e" + std::to_string(within / c.trials_per_point),
                    a.incsfa.output_dim, static_cast<int>(a.env.streams.size()));
    trials[i] = run_swap_trial(a, ec, seed, eo, [&](const IterationRecord& r) {
      if (files) files->record(r);
    });
  });

  json pts = json::array();
  for (std::size_t p = 0; p < configs.size(); ++p) {
    std::vector<SweepTrial> mine(trials.begin() + p * per_point, trials.begin() + (p + 1) * per_point);
    for (const auto& st : mine) {
      TrialSummary t;
      t.seed = st.seed;
      t.epsilon_c = st.epsilon_c;
      t.policies = {st.policy};
      t.iterations = st.iterations;
      t.outcome = to_string(st.outcome);
      rep.trials.push_back(t);
    }
    rep.points[p].table = summarize_epsilon_d(std::move(mine));
    const auto& tab = rep.points[p].table;
    json cells = json::array();
    for (const auto& e : tab.points)
      cells.push_back({{"epsilon_c", e.epsilon_c},
                       {"new", e.new_count},
                       {"old", e.old_count},
                       {"other", e.other_count},
                       {"majority", to_string(e.majority)}});
    pts.push_back({{"sigma", rep.points[p].sigma},
                   {"nu", rep.points[p].nu},
                   {"tau", rep.points[p].tau},
                   {"epsilon_d", tab.epsilon_d ? json(*tab.epsilon_d) : json(nullptr)},
                   {"cells", cells}});
  }

  // Table projections: vary sigma at the base nu/tau, and nu or tau at the
  // base sigma. The base is the config value when the grid holds it.
  auto base_of = [](const auto& list, auto own) { return std::find(list.begin(), list.end(), own) != list.end() ? own : list.front(); };
  const double base_sigma = base_of(sigmas, c.agent.reward.sigma);
  const double base_nu = base_of(nus, c.agent.incsfa.learning_rate);
  const int base_tau = base_of(taus, c.agent.env.tau);
  auto eps_d_cell = [](const EpsilonDTable& t) { return t.epsilon_d ? num(*t.epsilon_d) : std::string(); };

  if (opt.out) {
    std::ofstream points(*opt.out / "sweep_points.csv");
    points << "sigma,nu,tau,epsilon_c,new,old,other,majority\n";
    for (const auto& p : rep.points)
      for (const auto& e : p.table.points)
        points << num(p.sigma) << ',' << num(p.nu) << ',' << p.tau << ',' << num(e.epsilon_c) << ',' << e.new_count
               << ',' << e.old_count << ',' << e.other_count << ',' << to_string(e.majority) << '\n';
    std::ofstream tr(*opt.out / "sweep_trials.csv");
    tr << "sigma,nu,tau,epsilon_c,seed,policy,outcome,iterations\n";
    for (std::size_t p = 0; p < rep.points.size(); ++p)
      for (const auto& st : rep.points[p].table.trials)
        tr << num(rep.points[p].sigma) << ',' << num(rep.points[p].nu) << ',' << rep.points[p].tau << ','
           << num(st.epsilon_c) << ',' << st.seed << ',' << st.policy.to_string() << ',' << to_string(st.outcome)
           << ',' << st.iterations << '\n';

    std::ofstream t1(*opt.out / "table1.csv");
    t1 << "sigma,nu,tau,epsilon_d\n";
    for (const auto& p : rep.points)
      if (p.nu == base_nu && p.tau == base_tau)
        t1 << num(p.sigma) << ',' << num(p.nu) << ',' << p.tau << ',' << eps_d_cell(p.table) << '\n';

    std::vector<const SweepPoint*> t2rows;
    std::vector<std::string> varied;
    for (const auto& p : rep.points) {
      if (p.sigma != base_sigma) continue;
      if (p.tau == base_tau && nus.size() > 1) t2rows.push_back(&p), varied.push_back("nu");
      if (p.nu == base_nu && taus.size() > 1) t2rows.push_back(&p), varied.push_back("tau");
    }
    std::vector<double> vals;
    for (const auto* p : t2rows)
      if (p->table.epsilon_d) vals.push_back(*p->table.epsilon_d);
    std::sort(vals.begin(), vals.end());
    const double median = vals.empty() ? 0.0 : vals[vals.size() / 2];
    std::ofstream t2(*opt.out / "table2.csv");
    t2 << "varied,sigma,nu,tau,epsilon_d,outlier\n";
    for (std::size_t i = 0; i < t2rows.size(); ++i) {
      const auto* p = t2rows[i];
      const bool outlier = p->table.epsilon_d && std::abs(*p->table.epsilon_d - median) > 0.10;
      t2 << varied[i] << ',' << num(p->sigma) << ',' << num(p->nu) << ',' << p->tau << ',' << eps_d_cell(p->table)
         << ',' << outlier << '\n';
    }
  }

  json summary;
  summary["scenario"] = to_string(c.scenario);
  summary["config"] = to_json(c);
  summary["grid"] = to_json(grid);
  summary["seed_offset"] = opt.seed_offset;
  summary["points"] = pts;
  std::map<std::string, int> outcomes;
  for (const auto& t : rep.trials) ++outcomes[t.outcome];
  summary["outcomes"] = outcomes;
  summary["trial_count"] = rep.trials.size();
  if (opt.out) write_json(*opt.out / "summary.json", summary);
  rep.summary = std::move(summary);
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size() || a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const Eigen::VectorXd x = a.array() - a.mean();
  const Eigen::VectorXd y = b.array() - b.mean();
  const double d = std::sqrt(x.squaredNorm() * y.squaredNorm());
  if (!(d > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return x.dot(y) / d;
}

std::vector<AbstractionEval> evaluate_library(const AbstractionLibrary& lib, const EnvConfig& env, int stream,
                                              int batches, std::uint64_t seed, const GatingParams& gating) {
  if (stream < 0 || stream >= static_cast<int>(env.streams.size()))
    throw std::invalid_argument("stream index out of range");
  if (batches < 1) throw std::invalid_argument("need at least one batch");
  EnvConfig ec = env;
  ec.initial_stream = stream;
  Environment probe(ec, seed);
  for (int k = 0; k < lib.size(); ++k)
    if (lib[k].input_dim() != probe.input_dim())
      throw std::invalid_argument("dimension mismatch: abstraction " + std::to_string(k + 1) + " expects " +
                                  std::to_string(lib[k].input_dim()) + " inputs, stream has " +
                                  std::to_string(probe.input_dim()));

  std::vector<ObservationBatch> data;
  for (int b = 0; b < batches; ++b) data.push_back(probe.peek_batch(StreamId{stream}));

  std::vector<AbstractionEval> out;
  for (int k = 0; k < lib.size(); ++k) {
    const auto& f = lib[k];
    AbstractionEval e;
    e.index = k + 1;
    e.eta_inst_mean = Eigen::VectorXd::Zero(f.output_dim());
    int known = 0;
    std::vector<Eigen::MatrixXd> ys;
    for (const auto& batch : data) {
      const Eigen::MatrixXd y = f.outputs(batch.samples);
      e.eta_inst_mean += eta_inst(y, gating.var_floor).eta;
      known += f.knows(batch, gating.band_width, gating.var_floor);
      ys.push_back(y);
    }
    e.eta_inst_mean /= static_cast<double>(batches);
    e.known_fraction = static_cast<double>(known) / batches;
    e.known = 2 * known > batches;
    if (data.front().latents) {
      const int rows = batches * data.front().size();
      const Eigen::Index lcols = data.front().latents->cols();
      Eigen::MatrixXd lat(rows, lcols), y(rows, f.output_dim());
      for (int b = 0; b < batches; ++b) {
        lat.middleRows(b * data[b].size(), data[b].size()) = *data[b].latents;
        y.middleRows(b * data[b].size(), data[b].size()) = ys[b];
      }
      for (int c = 0; c < f.output_dim(); ++c) {
        int best = -1;
        double best_corr = 0.0;
        for (Eigen::Index l = 0; l < lcols; ++l) {
          const double r = correlation(y.col(c), lat.col(l));
          if (std::isfinite(r) && std::abs(r) > std::abs(best_corr)) best = static_cast<int>(l), best_corr = r;
        }
        e.best_latent.push_back(best);
        e.best_corr.push_back(best < 0 ? std::numeric_limits<double>::quiet_NaN() : best_corr);
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

json to_json(const AbstractionEval& e) {
  json j{{"index", e.index},
         {"eta_inst_mean", vec_json(e.eta_inst_mean)},
         {"known_fraction", e.known_fraction},
         {"verdict", e.known ? "known" : "novel"}};
  if (!e.best_latent.empty()) {
    json lat = json::array();
    for (std::size_t c = 0; c < e.best_latent.size(); ++c)
      lat.push_back({{"component", c + 1}, {"latent_column", e.best_latent[c]}, {"corr", num_json(e.best_corr[c])}});
    j["latent_corr"] = lat;
  }
  return j;
}

}  // namespace cdmisfa
