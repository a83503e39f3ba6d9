#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "cdmisfa/incsfa.hpp"
#include "cdmisfa/stream_env.hpp"

namespace cdmisfa {

struct GatingParams {
  double ema_rate = 0.005;  // per sample, for E(ydot^2) and Var(y)
  // Cascaded EMA stages at ema_rate. A second stage suppresses the ripple
  // that a periodic output leaves in a single EMA.
  int ema_stages = 2;
  // Moving mean/SD of eta_inst over the last inst_window batches. With
  // inst_window == 0 an EMA at inst_rate per batch is used instead; a rate
  // <= 0 derives it from ema_rate as 1 - (1 - ema_rate)^tau.
  int inst_window = 10;
  double inst_rate = 0.0;
  double delta = 0.0006;
  int settle_batches = 10;
  double sd_floor = 1e-6;
  double var_floor = 1e-12;
  double band_width = 2.0;
  // At freeze, recompute the stored eta_inst band by running the frozen
  // extractor over the recent window of raw batches instead of keeping the
  // adaptive outputs' statistics.
  bool rescore_band = true;
  // Convergence also needs every component slower than this. White noise
  // sits at sqrt(2) / (2 pi) ~ 0.225 whatever the weights, so an output that
  // never gets below it has found no temporal structure. <= 0 disables.
  double eta_ceiling = 0.2;
  // The settled batches must all come from one stream. A slow eta EMA over
  // a mix of streams can otherwise look flat during exploration.
  bool settle_single_stream = true;

  friend bool operator==(const GatingParams&, const GatingParams&) = default;
};

/// Per-component slowness over one batch.
struct EtaInst {
  Eigen::VectorXd eta;
  std::vector<bool> degenerate;

  int size() const { return static_cast<int>(eta.size()); }
};

/// eta_inst = (1/2pi) sqrt(E[ydot^2] / Var[y]) over the rows of `outputs`
/// (samples x components), with ydot the first difference between rows.
EtaInst eta_inst(const Eigen::MatrixXd& outputs, double var_floor = 1e-12);

/// One-pass eta over a sample stream: Welford mean and variance, and the
/// running mean of squared first differences. Same conventions as eta_inst.
class StreamingEta {
 public:
  explicit StreamingEta(int components);

  void push(const Eigen::VectorXd& y);
  void reset();
  std::int64_t count() const { return n_; }
  /// Zero for components with variance below var_floor. Needs two samples.
  Eigen::VectorXd eta(double var_floor = 1e-12) const;

 private:
  std::int64_t n_ = 0;
  Eigen::VectorXd mean_, m2_, dsum_, prev_;
};

/// Online slowness statistics of the adaptive abstraction's outputs.
class EtaStats {
 public:
  EtaStats(int components, GatingParams params, int tau);

  /// Advances the EMAs with one batch of outputs. `prev_output` is the last
  /// output of the previous batch from the same stream, if contiguous.
  void update(const Eigen::MatrixXd& outputs, const Eigen::VectorXd* prev_output);

  bool converged(double delta) const;
  bool converged() const { return converged(params_.delta); }

  int components() const { return static_cast<int>(eta_.size()); }
  int batches() const { return batches_; }
  bool has_eta_dot() const { return batches_ >= 2; }
  const Eigen::VectorXd& eta() const { return eta_; }
  const Eigen::VectorXd& eta_dot() const { return eta_dot_; }
  const std::vector<bool>& degenerate() const { return degenerate_; }
  const Eigen::VectorXd& inst_mean() const { return inst_mean_; }
  Eigen::VectorXd inst_sd() const;
  const EtaInst& last_inst() const { return last_inst_; }
  int settled() const { return settled_; }
  int degenerate_count() const;

 private:
  struct Record {
    Eigen::VectorXd eta_dot;
    std::vector<bool> degenerate;
  };
  static bool small_eta_dot(const Record& r, double delta);

  GatingParams params_;
  double inst_rate_;
  std::deque<Record> recent_;
  bool deriv_started_ = false;
  int batches_ = 0;
  int inst_batches_ = 0;
  int settled_ = 0;
  Eigen::VectorXd ydot2_, mean_, var_;
  std::vector<Eigen::VectorXd> ydot2_stages_, var_stages_;
  bool ema_started_ = false;
  Eigen::VectorXd eta_, eta_prev_, eta_dot_;
  std::vector<bool> degenerate_;
  Eigen::VectorXd inst_mean_, inst_var_;
  std::vector<int> inst_counts_;
  std::deque<EtaInst> inst_window_;
  void refresh_window_stats();
  EtaInst last_inst_;
};

struct Provenance {
  int index = 0;                  // u, 1-based
  std::int64_t iteration = 0;     // iteration at freeze
  int trained_stream = -1;        // dominant stream in the batches before freeze
  std::vector<int> encoded_streams;  // filled in by later evaluation
};

/// Immutable saved abstraction plus stored eta_inst band.
class FrozenAbstraction {
 public:
  FrozenAbstraction(LinearExtractor extractor, Eigen::VectorXd eta_mean, Eigen::VectorXd eta_sd,
                    std::vector<bool> degenerate, Provenance provenance, Eigen::VectorXd final_eta);

  Eigen::VectorXd output(const Eigen::VectorXd& x) const { return extractor_.apply(x); }
  Eigen::MatrixXd outputs(const Eigen::MatrixXd& samples) const { return extractor_.apply_rows(samples); }

  /// True when every stored non-degenerate component's eta_inst on the batch
  /// lies inside mean +- width * SD.
  bool knows(const ObservationBatch& batch, double band_width = 2.0, double var_floor = 1e-12) const;

  const LinearExtractor& extractor() const { return extractor_; }
  const Eigen::VectorXd& eta_mean() const { return eta_mean_; }
  const Eigen::VectorXd& eta_sd() const { return eta_sd_; }
  const std::vector<bool>& degenerate() const { return degenerate_; }
  const Provenance& provenance() const { return provenance_; }
  const Eigen::VectorXd& final_eta() const { return final_eta_; }
  int input_dim() const { return static_cast<int>(extractor_.matrix.cols()); }
  int output_dim() const { return static_cast<int>(extractor_.matrix.rows()); }

  FrozenAbstraction with_encoded_streams(std::vector<int> streams) const;

  nlohmann::json to_json() const;
  static FrozenAbstraction from_json(const nlohmann::json& j);

 private:
  LinearExtractor extractor_;
  Eigen::VectorXd eta_mean_;
  Eigen::VectorXd eta_sd_;
  std::vector<bool> degenerate_;
  Provenance provenance_;
  Eigen::VectorXd final_eta_;
};

/// Snapshot of the adaptive abstraction with the current band statistics.
/// With params.rescore_band and a non-empty `recent` (raw batches, oldest
/// first), the band is the mean/SD of the snapshot's own eta_inst on them.
FrozenAbstraction freeze(const AdaptiveAbstraction& abstraction, const EtaStats& stats,
                         const GatingParams& params, Provenance provenance,
                         const std::vector<Eigen::MatrixXd>& recent = {});

/// Ordered frozen abstractions, in freeze order.
class AbstractionLibrary {
 public:
  void append(FrozenAbstraction f) { items_.push_back(std::move(f)); }
  int size() const { return static_cast<int>(items_.size()); }
  bool empty() const { return items_.empty(); }
  const FrozenAbstraction& operator[](int i) const { return items_.at(i); }
  FrozenAbstraction& mutable_at(int i) { return items_.at(i); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  nlohmann::json to_json() const;
  static AbstractionLibrary from_json(const nlohmann::json& j);

 private:
  std::vector<FrozenAbstraction> items_;
};

/// True when every sample equals the first one.
bool is_constant(const ObservationBatch& batch);

/// True when no frozen abstraction knows the batch. Empty library: true.
bool is_novel(const ObservationBatch& batch, const AbstractionLibrary& library,
              const GatingParams& params = {});

}  // namespace cdmisfa
