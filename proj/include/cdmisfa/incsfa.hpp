#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "cdmisfa/stream_env.hpp"

namespace cdmisfa {

struct IncSfaParams {
  int output_dim = 2;      // J
  int max_rank = 0;        // K cap for whitening; 0 keeps the full input rank
  double learning_rate = 0.05;  // nu
  double lateral_inhibition = 2.0;
  double amnesic = 2.0;    // mu in the amnesic rate (1 + mu) / t
  int amnesic_start = 20;  // plain 1/t averaging before this many samples
  // With amnesic_r > 0, mu grows linearly to `amnesic` by sample
  // amnesic_ramp_end and then by 1 per amnesic_r samples, so the rate
  // approaches 1/amnesic_r instead of vanishing.
  double amnesic_r = 2000.0;
  int amnesic_ramp_end = 200;
  int warmup = 50;
  double eigen_floor = 1e-9;
  // Rate of the running derivative covariance driving the minor component
  // step; 0 uses the instantaneous zdot zdot^T.
  double derivative_rate = 0.02;
  // Divide the step by the trace of the derivative covariance, making nu a
  // relative rate independent of the stream's derivative power.
  bool normalize_step = true;

  friend bool operator==(const IncSfaParams&, const IncSfaParams&) = default;
};

/// Raised when statistics are not yet sufficient for the requested result.
class InsufficientStatistics : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on non-finite inputs; the caller rejects the whole batch.
class NonFiniteInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Affine read-out y = M (x - mean). Shared by adaptive and frozen abstractions.
struct LinearExtractor {
  Eigen::VectorXd mean;
  Eigen::MatrixXd matrix;  // J x I

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const { return matrix * (x - mean); }
  Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& samples) const;

  friend bool operator==(const LinearExtractor&, const LinearExtractor&) = default;
};

/// Online slow feature analysis: amnesic mean, candid covariance-free
/// incremental PCA for whitening, and minor component extraction with
/// lateral inhibition on whitened derivatives.
class AdaptiveAbstraction {
 public:
  AdaptiveAbstraction(int input_dim, IncSfaParams params, Rng& rng);

  /// One learning step on sample x. `prev` is the predecessor sample from
  /// the same stream, or nullptr when no derivative is available (first
  /// sample, or first sample after a switch). Returns ||phi(t+1) - phi(t)||_F;
  /// zero during warm-up.
  double update(const Eigen::VectorXd& x, const Eigen::VectorXd* prev);

  Eigen::VectorXd output(const Eigen::VectorXd& x) const;
  bool ready() const { return samples_ > params_.warmup; }

  /// phi = W * whitening, J x I.
  const Eigen::MatrixXd& composite() const { return composite_; }
  LinearExtractor extractor() const { return {mean_, composite_}; }
  Eigen::MatrixXd whitening() const;

  int input_dim() const { return input_dim_; }
  int output_dim() const { return params_.output_dim; }
  int rank() const { return rank_; }
  std::int64_t samples() const { return samples_; }
  const IncSfaParams& params() const { return params_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  const Eigen::MatrixXd& components() const { return components_; }  // I x K, unnormalized
  Eigen::VectorXd eigenvalues() const;
  const Eigen::MatrixXd& weights() const { return weights_; }  // J x K
  const Eigen::MatrixXd& derivative_covariance() const { return dcov_; }  // K x K

  nlohmann::json to_json() const;
  static AdaptiveAbstraction from_json(const nlohmann::json& j);

 private:
  AdaptiveAbstraction() = default;
  double amnesic_rate(std::int64_t n) const;
  void update_pca(const Eigen::VectorXd& centered);
  void refresh_composite();

  IncSfaParams params_;
  int input_dim_ = 0;
  int rank_ = 0;
  std::int64_t samples_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd components_;  // columns v_i
  std::vector<std::int64_t> component_counts_;
  Eigen::MatrixXd weights_;
  Eigen::MatrixXd composite_;
  Eigen::MatrixXd dcov_;
  bool dcov_started_ = false;
};

/// Tracks xi per sample and the tau-window means feeding the curiosity reward.
class WeightChangeTracker {
 public:
  explicit WeightChangeTracker(int window) : window_(window) {}

  void push(double xi);
  int windows() const { return windows_; }
  double last() const { return last_; }

  /// (<xi>_t, <xi>_t - <xi>_{t-tau}). Requires two complete windows.
  std::pair<double, double> window_means() const;

 private:
  int window_;
  int count_ = 0;
  double sum_ = 0.0;
  double last_ = 0.0;
  int windows_ = 0;
  double current_mean_ = 0.0;
  double previous_mean_ = 0.0;
};

}  // namespace cdmisfa
