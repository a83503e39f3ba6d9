#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace cdmisfa {

using Rng = std::mt19937_64;

enum class Action : int { Stay = 0, Switch = 1 };

/// Index of an observation stream. Stable for the life of an experiment,
/// even when the generator behind the slot is swapped.
struct StreamId {
  int index = 0;
  friend bool operator==(StreamId, StreamId) = default;
};

/// Three nonlinear oscillators with phase theta_t = 2*pi*t/500.
enum class OscFamily { X1, X2, X3 };

constexpr int kOscPeriod = 500;

double osc_phase(std::int64_t t);
Eigen::Vector2d osc_sample(OscFamily family, std::int64_t t);

OscFamily parse_osc_family(const std::string& name);
std::string to_string(OscFamily family);

struct OscStreamParams {
  OscFamily family = OscFamily::X1;
};

/// i.i.d. uniform samples in [low, high]. low == high gives a constant stream.
struct NoiseStreamParams {
  int dim = 2;
  double low = 0.0;
  double high = 0.0;
};

/// One viewport of the shared blob scene.
struct ViewportStreamParams {
  int viewport = 0;
};

using StreamSpec = std::variant<OscStreamParams, NoiseStreamParams, ViewportStreamParams>;

std::string describe(const StreamSpec& spec);

// ---------------------------------------------------------------------------
// Blob scene
// ---------------------------------------------------------------------------

enum class MotionLaw { ToggleY, UniformRandom, RandomWalk };

struct BlobObject {
  MotionLaw law = MotionLaw::UniformRandom;
  double x_min = 0, x_max = 0;
  double y_min = 0, y_max = 0;
  // ToggleY: y alternates between y_min and y_max every toggle_period frames.
  int toggle_period = 5;
  // RandomWalk: gaussian steps.
  double step_x = 1.0;
  double step_y = 0.2;
  // RandomWalk with step_period > 1: y moves by +-step_y (random sign,
  // reflected at the bounds) once every step_period frames instead of a
  // gaussian step per frame.
  int step_period = 1;
};

struct BlobSceneParams {
  int scene_width = 30;
  int height = 10;
  int viewport_width = 14;
  std::vector<int> viewport_offsets{0, 8, 16};
  double radius = 1.0;
  std::vector<BlobObject> objects;

  /// Toggling object in viewport 0, uniformly random object around viewport
  /// 1, slow-y random walk in viewport 2.
  static BlobSceneParams defaults();

  int num_viewports() const { return static_cast<int>(viewport_offsets.size()); }
  int pixels() const { return viewport_width * height; }
};

struct ObjectState {
  double x = 0;
  double y = 0;
};

/// Shared scene advanced one frame per sample drawn from any viewport.
class BlobScene {
 public:
  BlobScene() = default;
  BlobScene(BlobSceneParams params, Rng& rng);

  void advance(Rng& rng);
  const std::vector<ObjectState>& objects() const { return objects_; }
  const BlobSceneParams& params() const { return params_; }
  std::int64_t frame() const { return frame_; }

  /// Object positions flattened (x_0, y_0, x_1, y_1, ...).
  Eigen::VectorXd latents() const;

 private:
  BlobSceneParams params_;
  std::vector<ObjectState> objects_;
  std::int64_t frame_ = 0;
};

/// Renders the objects seen through `viewport` into a flattened
/// row-major grayscale frame. Centers are rounded to the pixel grid and
/// a pixel is lit when its offset from the center lies within the radius.
Eigen::VectorXd render_blob_frame(const BlobSceneParams& params,
                                  const std::vector<ObjectState>& objects, StreamId viewport);

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

struct ObservationBatch {
  StreamId stream;
  Eigen::MatrixXd samples;  // tau x I, one sample per row
  std::int64_t start_time = 0;
  // First sample follows the previous batch of the same stream.
  bool continues = false;
  // Ground-truth latent per sample when the stream has one (rows align with samples).
  std::optional<Eigen::MatrixXd> latents;

  int size() const { return static_cast<int>(samples.rows()); }
  int dim() const { return static_cast<int>(samples.cols()); }
};

enum class ClockMode { Observed, Global };

struct EnvConfig {
  std::vector<StreamSpec> streams;
  int tau = 100;
  ClockMode clock = ClockMode::Observed;
  std::optional<BlobSceneParams> scene;
  int initial_stream = 0;
};

struct SwapSchedule {
  double epsilon_c = 0.9;
  int target = 0;
  StreamSpec replacement = OscStreamParams{OscFamily::X1};
  bool fired = false;
};

/// Two-action exploration environment over n streams.
class Environment {
 public:
  Environment(EnvConfig config, std::uint64_t seed);

  ObservationBatch step(Action action);

  /// Replaces the target stream when epsilon dropped below the threshold.
  /// Returns true when the swap fired on this call.
  bool apply_swap(SwapSchedule& schedule, double current_epsilon);

  StreamId current() const { return current_; }
  int num_streams() const { return static_cast<int>(config_.streams.size()); }
  int tau() const { return config_.tau; }
  int input_dim() const { return input_dim_; }
  std::int64_t stream_time(StreamId s) const { return clocks_.at(s.index); }
  const EnvConfig& config() const { return config_; }

  /// tau samples from stream s without moving the agent. Used for evaluation.
  ObservationBatch peek_batch(StreamId s);

 private:
  ObservationBatch draw(StreamId s, bool continues);
  Eigen::VectorXd sample_stream(int index, std::int64_t t, Eigen::VectorXd* latent);

  EnvConfig config_;
  Rng rng_;
  std::optional<BlobScene> scene_;
  std::vector<std::int64_t> clocks_;
  std::int64_t global_clock_ = 0;
  StreamId current_;
  int input_dim_ = 0;
  bool has_history_ = false;
};

int spec_dim(const StreamSpec& spec, const std::optional<BlobSceneParams>& scene);

/// Debug dump: one row per sample with columns t, stream, x_1..x_I.
void write_batch_csv(std::ostream& out, const ObservationBatch& batch, bool header);

}  // namespace cdmisfa
