#include "cdmisfa/stream_env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace cdmisfa {

double osc_phase(std::int64_t t) {
  // Reduce t first so the phase stays exact across periods.
  const auto k = t % kOscPeriod;
  return 2.0 * std::numbers::pi * static_cast<double>(k) / kOscPeriod;
}

Eigen::Vector2d osc_sample(OscFamily family, std::int64_t t) {
  if (t < 0) throw std::invalid_argument("osc_sample: t must be non-negative");
  const double th = osc_phase(t);
  switch (family) {
    case OscFamily::X1: {
      const double c = std::cos(44.0 * th);
      return {std::sin(4.0 * th - std::numbers::pi / 4.0) - c * c, c};
    }
    case OscFamily::X2: {
      const double c = std::cos(27.0 * th);
      return {std::sin(3.0 * th) + c * c, c};
    }
    case OscFamily::X3: {
      const double c = std::cos(12.0 * th);
      return {c, std::cos(2.0 * th) + c * c};
    }
  }
  throw std::logic_error("osc_sample: unknown family");
}

OscFamily parse_osc_family(const std::string& name) {
  if (name == "x1") return OscFamily::X1;
  if (name == "x2") return OscFamily::X2;
  if (name == "x3") return OscFamily::X3;
  throw std::invalid_argument("unknown oscillator family '" + name + "' (expected x1|x2|x3)");
}

std::string to_string(OscFamily family) {
  switch (family) {
    case OscFamily::X1: return "x1";
    case OscFamily::X2: return "x2";
    case OscFamily::X3: return "x3";
  }
  return "?";
}

std::string describe(const StreamSpec& spec) {
  struct Visitor {
    std::string operator()(const OscStreamParams& p) const { return "osc:" + to_string(p.family); }
    std::string operator()(const NoiseStreamParams& p) const {
      if (p.low == p.high) return p.low == 0.0 ? "zero" : "const";
      return "noise";
    }
    std::string operator()(const ViewportStreamParams& p) const {
      return "viewport:" + std::to_string(p.viewport);
    }
  };
  return std::visit(Visitor{}, spec);
}

int spec_dim(const StreamSpec& spec, const std::optional<BlobSceneParams>& scene) {
  if (std::holds_alternative<OscStreamParams>(spec)) return 2;
  if (const auto* n = std::get_if<NoiseStreamParams>(&spec)) return n->dim;
  const auto& v = std::get<ViewportStreamParams>(spec);
  if (!scene) throw std::invalid_argument("viewport stream requires a blob scene");
  if (v.viewport < 0 || v.viewport >= scene->num_viewports())
    throw std::out_of_range("viewport index out of range");
  return scene->pixels();
}

// ---------------------------------------------------------------------------

BlobSceneParams BlobSceneParams::defaults() {
  BlobSceneParams p;
  BlobObject toggle;
  toggle.law = MotionLaw::ToggleY;
  toggle.x_min = 1;
  toggle.x_max = 6;
  toggle.y_min = 2;
  toggle.y_max = 7;
  toggle.toggle_period = 5;

  BlobObject uniform;
  uniform.law = MotionLaw::UniformRandom;
  uniform.x_min = 9;
  uniform.x_max = 20;
  uniform.y_min = 1;
  uniform.y_max = 8;

  BlobObject walk;
  walk.law = MotionLaw::RandomWalk;
  walk.x_min = 23;
  walk.x_max = 28;
  walk.y_min = 3;
  walk.y_max = 6;
  walk.step_x = 5.0;
  walk.step_y = 1.0;
  walk.step_period = 5;

  p.objects = {toggle, uniform, walk};
  return p;
}

BlobScene::BlobScene(BlobSceneParams params, Rng& rng) : params_(std::move(params)) {
  objects_.resize(params_.objects.size());
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    const auto& o = params_.objects[i];
    std::uniform_real_distribution<double> ux(o.x_min, o.x_max);
    objects_[i].x = ux(rng);
    if (o.law == MotionLaw::ToggleY) {
      objects_[i].y = o.y_min;
    } else {
      std::uniform_real_distribution<double> uy(o.y_min, o.y_max);
      objects_[i].y = uy(rng);
    }
  }
}

void BlobScene::advance(Rng& rng) {
  ++frame_;
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    const auto& o = params_.objects[i];
    auto& s = objects_[i];
    switch (o.law) {
      case MotionLaw::ToggleY: {
        std::uniform_real_distribution<double> ux(o.x_min, o.x_max);
        s.x = ux(rng);
        s.y = ((frame_ / o.toggle_period) % 2 == 0) ? o.y_min : o.y_max;
        break;
      }
      case MotionLaw::UniformRandom: {
        std::uniform_real_distribution<double> ux(o.x_min, o.x_max);
        std::uniform_real_distribution<double> uy(o.y_min, o.y_max);
        s.x = ux(rng);
        s.y = uy(rng);
        break;
      }
      case MotionLaw::RandomWalk: {
        std::normal_distribution<double> n01(0.0, 1.0);
        s.x = std::clamp(s.x + o.step_x * n01(rng), o.x_min, o.x_max);
        if (o.step_period <= 1) {
          s.y = std::clamp(s.y + o.step_y * n01(rng), o.y_min, o.y_max);
        } else if (frame_ % o.step_period == 0) {
          std::bernoulli_distribution up(0.5);
          double dy = up(rng) ? o.step_y : -o.step_y;
          if (s.y + dy > o.y_max || s.y + dy < o.y_min) dy = -dy;
          s.y = std::clamp(s.y + dy, o.y_min, o.y_max);
        }
        break;
      }
    }
  }
}

Eigen::VectorXd BlobScene::latents() const {
  Eigen::VectorXd out(2 * static_cast<Eigen::Index>(objects_.size()));
  for (std::size_t i = 0; i < objects_.size(); ++i) {
    out(2 * i) = objects_[i].x;
    out(2 * i + 1) = objects_[i].y;
  }
  return out;
}

Eigen::VectorXd render_blob_frame(const BlobSceneParams& params,
                                  const std::vector<ObjectState>& objects, StreamId viewport) {
  if (viewport.index < 0 || viewport.index >= params.num_viewports())
    throw std::out_of_range("render_blob_frame: viewport index out of range");
  const int w = params.viewport_width;
  const int h = params.height;
  const int offset = params.viewport_offsets[viewport.index];
  Eigen::VectorXd frame = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(w) * h);
  const int r = static_cast<int>(std::ceil(params.radius));
  const double r2 = params.radius * params.radius;
  for (const auto& o : objects) {
    const int cx = static_cast<int>(std::lround(std::clamp(o.x, 0.0, params.scene_width - 1.0)));
    const int cy = static_cast<int>(std::lround(std::clamp(o.y, 0.0, h - 1.0)));
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        if (dx * dx + dy * dy > r2) continue;
        const int sx = cx + dx;
        const int py = cy + dy;
        const int px = sx - offset;
        if (sx < 0 || sx >= params.scene_width || py < 0 || py >= h || px < 0 || px >= w) continue;
        frame(py * w + px) = 1.0;
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------

Environment::Environment(EnvConfig config, std::uint64_t seed)
    : config_(std::move(config)), rng_(seed) {
  const int n = num_streams();
  if (n < 2) throw std::invalid_argument("environment needs at least 2 streams");
  if (config_.tau < 2) throw std::invalid_argument("tau must be >= 2");
  input_dim_ = spec_dim(config_.streams.front(), config_.scene);
  for (const auto& s : config_.streams) {
    if (spec_dim(s, config_.scene) != input_dim_)
      throw std::invalid_argument("all streams must share the input dimension");
  }
  if (config_.scene) scene_.emplace(*config_.scene, rng_);
  clocks_.assign(n, 0);
  if (config_.initial_stream < 0) {
    std::uniform_int_distribution<int> pick(0, n - 1);
    current_ = StreamId{pick(rng_)};
  } else {
    if (config_.initial_stream >= n) throw std::out_of_range("initial_stream out of range");
    current_ = StreamId{config_.initial_stream};
  }
}

Eigen::VectorXd Environment::sample_stream(int index, std::int64_t t, Eigen::VectorXd* latent) {
  const auto& spec = config_.streams[index];
  if (const auto* o = std::get_if<OscStreamParams>(&spec)) {
    return osc_sample(o->family, t);
  }
  if (const auto* n = std::get_if<NoiseStreamParams>(&spec)) {
    if (n->low == n->high) return Eigen::VectorXd::Constant(n->dim, n->low);
    std::uniform_real_distribution<double> u(n->low, n->high);
    Eigen::VectorXd x(n->dim);
    for (int i = 0; i < n->dim; ++i) x(i) = u(rng_);
    return x;
  }
  const auto& v = std::get<ViewportStreamParams>(spec);
  scene_->advance(rng_);
  if (latent) *latent = scene_->latents();
  return render_blob_frame(scene_->params(), scene_->objects(), StreamId{v.viewport});
}

ObservationBatch Environment::draw(StreamId s, bool continues) {
  ObservationBatch batch;
  batch.stream = s;
  batch.continues = continues;
  batch.samples.resize(config_.tau, input_dim_);
  const bool viewport = std::holds_alternative<ViewportStreamParams>(config_.streams[s.index]);
  if (viewport) batch.latents.emplace(config_.tau, 2 * scene_->objects().size());
  auto time_of = [&]() {
    return config_.clock == ClockMode::Observed ? clocks_[s.index] : global_clock_;
  };
  batch.start_time = time_of();
  for (int i = 0; i < config_.tau; ++i) {
    Eigen::VectorXd latent;
    batch.samples.row(i) = sample_stream(s.index, time_of(), viewport ? &latent : nullptr).transpose();
    if (viewport) batch.latents->row(i) = latent.transpose();
    ++clocks_[s.index];
    ++global_clock_;
  }
  return batch;
}

ObservationBatch Environment::step(Action action) {
  bool continues = has_history_;
  if (action == Action::Switch) {
    const int n = num_streams();
    std::uniform_int_distribution<int> pick(0, n - 2);
    int next = pick(rng_);
    if (next >= current_.index) ++next;
    current_ = StreamId{next};
    continues = false;
  }
  // Under the global clock a stay is contiguous, but a stream resumed after
  // a switch has skipped time while unobserved.
  has_history_ = true;
  return draw(current_, continues);
}

ObservationBatch Environment::peek_batch(StreamId s) {
  if (s.index < 0 || s.index >= num_streams()) throw std::out_of_range("peek_batch: bad stream");
  return draw(s, false);
}

bool Environment::apply_swap(SwapSchedule& schedule, double current_epsilon) {
  if (schedule.fired || !(current_epsilon < schedule.epsilon_c)) return false;
  if (schedule.target < 0 || schedule.target >= num_streams())
    throw std::out_of_range("swap target out of range");
  if (spec_dim(schedule.replacement, config_.scene) != input_dim_)
    throw std::invalid_argument("swap replacement dimension mismatch");
  config_.streams[schedule.target] = schedule.replacement;
  schedule.fired = true;
  return true;
}

void write_batch_csv(std::ostream& out, const ObservationBatch& batch, bool header) {
  if (header) {
    out << "t,stream";
    for (int j = 0; j < batch.dim(); ++j) out << ",x_" << (j + 1);
    out << '\n';
  }
  for (int i = 0; i < batch.size(); ++i) {
    out << (batch.start_time + i) << ',' << batch.stream.index;
    for (int j = 0; j < batch.dim(); ++j) out << ',' << batch.samples(i, j);
    out << '\n';
  }
}

}  // namespace cdmisfa
