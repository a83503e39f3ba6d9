#include "cdmisfa/incsfa.hpp"

#include <algorithm>
#include <cmath>

namespace cdmisfa {

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

std::vector<std::vector<double>> to_rows(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> rows(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows[r].resize(m.cols());
    for (Eigen::Index c = 0; c < m.cols(); ++c) rows[r][c] = m(r, c);
  }
  return rows;
}

Eigen::VectorXd from_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd from_rows(const nlohmann::json& j, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  if (static_cast<Eigen::Index>(j.size()) != rows) throw std::invalid_argument("matrix row count mismatch");
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(r);
    if (static_cast<Eigen::Index>(row.size()) != cols) throw std::invalid_argument("matrix column count mismatch");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(c).get<double>();
  }
  return m;
}

}  // namespace

Eigen::MatrixXd LinearExtractor::apply_rows(const Eigen::MatrixXd& samples) const {
  return (samples.rowwise() - mean.transpose()) * matrix.transpose();
}

AdaptiveAbstraction::AdaptiveAbstraction(int input_dim, IncSfaParams params, Rng& rng)
    : params_(params), input_dim_(input_dim) {
  if (input_dim < 1) throw std::invalid_argument("input_dim must be positive");
  rank_ = params_.max_rank > 0 ? std::min(params_.max_rank, input_dim) : input_dim;
  if (params_.output_dim < 1 || params_.output_dim > rank_)
    throw std::invalid_argument("output_dim must be in [1, whitening rank]");
  if (params_.warmup < 1) throw std::invalid_argument("warmup must be at least 1 sample");
  if (!(params_.derivative_rate >= 0.0 && params_.derivative_rate <= 1.0))
    throw std::invalid_argument("derivative_rate must be in [0, 1]");

  mean_ = Eigen::VectorXd::Zero(input_dim_);
  components_ = Eigen::MatrixXd::Zero(input_dim_, rank_);
  component_counts_.assign(rank_, 0);

  // Random orthonormal rows.
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd g(rank_, params_.output_dim);
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = n01(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rank_, params_.output_dim);
  weights_ = q.transpose();
  composite_ = Eigen::MatrixXd::Zero(params_.output_dim, input_dim_);
  dcov_ = Eigen::MatrixXd::Zero(rank_, rank_);
}

double AdaptiveAbstraction::amnesic_rate(std::int64_t n) const {
  const double t = static_cast<double>(n);
  if (n <= params_.amnesic_start) return 1.0 / t;
  if (params_.amnesic_r <= 0.0) return (1.0 + params_.amnesic) / t;
  const double t1 = params_.amnesic_start;
  const double t2 = std::max(params_.amnesic_ramp_end, params_.amnesic_start + 1);
  const double mu = t <= t2 ? params_.amnesic * (t - t1) / (t2 - t1)
                            : params_.amnesic + (t - t2) / params_.amnesic_r;
  return std::min(1.0, (1.0 + mu) / t);
}

void AdaptiveAbstraction::update_pca(const Eigen::VectorXd& centered) {
  Eigen::VectorXd u = centered;
  for (int i = 0; i < rank_; ++i) {
    auto v = components_.col(i);
    if (component_counts_[i] == 0) {
      if (u.norm() <= 0.0) break;
      v = u;
      component_counts_[i] = 1;
      break;
    }
    const double rate = amnesic_rate(++component_counts_[i]);
    const double vn = v.norm();
    if (vn > 0.0) v = (1.0 - rate) * v + rate * (u.dot(v) / vn) * u;
    const double vn2 = v.norm();
    if (vn2 <= 0.0) continue;
    const Eigen::VectorXd vhat = v / vn2;
    u -= u.dot(vhat) * vhat;
  }
}

Eigen::VectorXd AdaptiveAbstraction::eigenvalues() const { return components_.colwise().norm().transpose(); }

Eigen::MatrixXd AdaptiveAbstraction::whitening() const {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(rank_, input_dim_);
  for (int i = 0; i < rank_; ++i) {
    const double lambda = components_.col(i).norm();
    if (component_counts_[i] == 0 || lambda < params_.eigen_floor) continue;
    s.row(i) = components_.col(i).transpose() / (lambda * std::sqrt(lambda));
  }
  return s;
}

void AdaptiveAbstraction::refresh_composite() { composite_ = weights_ * whitening(); }

double AdaptiveAbstraction::update(const Eigen::VectorXd& x, const Eigen::VectorXd* prev) {
  if (x.size() != input_dim_) throw std::invalid_argument("incsfa update: dimension mismatch");
  if (!x.allFinite() || (prev && !prev->allFinite())) throw NonFiniteInput("incsfa update: non-finite input");

  ++samples_;
  mean_ += amnesic_rate(samples_) * (x - mean_);
  const Eigen::VectorXd centered = x - mean_;
  // A centered sample of exactly zero carries no direction; skipping it keeps
  // the eigenvalue estimates from decaying on constant input.
  if (centered.squaredNorm() > 0.0) update_pca(centered);

  const Eigen::MatrixXd before = composite_;
  const Eigen::MatrixXd s = whitening();
  const bool learning = samples_ > params_.warmup;
  const Eigen::VectorXd zdot = learning && prev ? Eigen::VectorXd(s * (x - *prev)) : Eigen::VectorXd();
  // A zero derivative carries no slowness information; without this guard
  // the normalized running step would keep chasing a stale covariance.
  if (learning && prev && zdot.squaredNorm() > 0.0) {
    const bool running = params_.derivative_rate > 0.0;
    if (running) {
      const double r = dcov_started_ ? params_.derivative_rate : 1.0;
      dcov_ = (1.0 - r) * dcov_ + r * zdot * zdot.transpose();
      dcov_started_ = true;
    }
    // Scale of the covariance term only; inhibition stays absolute so that
    // gamma keeps dominating the normalized spectrum.
    double scale = 1.0;
    if (params_.normalize_step) {
      const double power = running ? dcov_.trace() : zdot.squaredNorm();
      scale = power > 0.0 ? 1.0 / power : 0.0;
    }
    const double nu = params_.learning_rate;
    for (int i = 0; i < params_.output_dim; ++i) {
      Eigen::VectorXd w = weights_.row(i).transpose();
      Eigen::VectorXd step = running ? Eigen::VectorXd(dcov_ * w) : Eigen::VectorXd(zdot * zdot.dot(w));
      step *= scale;
      for (int j = 0; j < i; ++j) {
        const Eigen::VectorXd wj = weights_.row(j).transpose();
        step += params_.lateral_inhibition * wj.dot(w) * wj;
      }
      w -= nu * step;
      const double norm = w.norm();
      if (norm > 0.0) weights_.row(i) = (w / norm).transpose();
    }
  }
  composite_ = weights_ * s;
  return learning ? (composite_ - before).norm() : 0.0;
}

Eigen::VectorXd AdaptiveAbstraction::output(const Eigen::VectorXd& x) const {
  if (!ready()) throw InsufficientStatistics("abstraction output requested before warm-up completed");
  if (x.size() != input_dim_) throw std::invalid_argument("abstraction output: dimension mismatch");
  return composite_ * (x - mean_);
}

nlohmann::json AdaptiveAbstraction::to_json() const {
  nlohmann::json j;
  j["format"] = "cdmisfa-abstraction";
  j["version"] = 1;
  j["input_dim"] = input_dim_;
  j["output_dim"] = params_.output_dim;
  j["rank"] = rank_;
  j["samples"] = samples_;
  j["params"] = {{"output_dim", params_.output_dim},
                 {"max_rank", params_.max_rank},
                 {"learning_rate", params_.learning_rate},
                 {"lateral_inhibition", params_.lateral_inhibition},
                 {"amnesic", params_.amnesic},
                 {"amnesic_start", params_.amnesic_start},
                 {"amnesic_r", params_.amnesic_r},
                 {"amnesic_ramp_end", params_.amnesic_ramp_end},
                 {"warmup", params_.warmup},
                 {"eigen_floor", params_.eigen_floor},
                 {"derivative_rate", params_.derivative_rate},
                 {"normalize_step", params_.normalize_step}};
  j["mean"] = to_vec(mean_);
  j["components"] = to_rows(components_.transpose());
  j["component_counts"] = component_counts_;
  j["eigenvalues"] = to_vec(eigenvalues());
  j["weights"] = to_rows(weights_);
  j["derivative_covariance"] = to_rows(dcov_);
  j["derivative_started"] = dcov_started_;
  return j;
}

AdaptiveAbstraction AdaptiveAbstraction::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cdmisfa-abstraction") throw std::invalid_argument("not an abstraction document");
  AdaptiveAbstraction a;
  const auto& p = j.at("params");
  a.params_.output_dim = p.at("output_dim").get<int>();
  a.params_.max_rank = p.at("max_rank").get<int>();
  a.params_.learning_rate = p.at("learning_rate").get<double>();
  a.params_.lateral_inhibition = p.at("lateral_inhibition").get<double>();
  a.params_.amnesic = p.at("amnesic").get<double>();
  a.params_.amnesic_start = p.at("amnesic_start").get<int>();
  a.params_.amnesic_r = p.value("amnesic_r", IncSfaParams{}.amnesic_r);
  a.params_.amnesic_ramp_end = p.value("amnesic_ramp_end", IncSfaParams{}.amnesic_ramp_end);
  a.params_.warmup = p.at("warmup").get<int>();
  a.params_.eigen_floor = p.at("eigen_floor").get<double>();
  a.params_.derivative_rate = p.value("derivative_rate", IncSfaParams{}.derivative_rate);
  a.params_.normalize_step = p.value("normalize_step", IncSfaParams{}.normalize_step);
  a.input_dim_ = j.at("input_dim").get<int>();
  a.rank_ = j.at("rank").get<int>();
  a.samples_ = j.at("samples").get<std::int64_t>();
  a.mean_ = from_vec(j.at("mean"));
  a.components_ = from_rows(j.at("components"), a.rank_, a.input_dim_).transpose();
  a.component_counts_ = j.at("component_counts").get<std::vector<std::int64_t>>();
  a.weights_ = from_rows(j.at("weights"), a.params_.output_dim, a.rank_);
  a.dcov_ = j.contains("derivative_covariance") ? from_rows(j.at("derivative_covariance"), a.rank_, a.rank_)
                                                : Eigen::MatrixXd::Zero(a.rank_, a.rank_);
  a.dcov_started_ = j.value("derivative_started", false);
  if (a.mean_.size() != a.input_dim_ || static_cast<int>(a.component_counts_.size()) != a.rank_)
    throw std::invalid_argument("abstraction document has inconsistent dimensions");
  a.refresh_composite();
  return a;
}

// ---------------------------------------------------------------------------

void WeightChangeTracker::push(double xi) {
  last_ = xi;
  sum_ += xi;
  if (++count_ == window_) {
    previous_mean_ = current_mean_;
    current_mean_ = sum_ / window_;
    ++windows_;
    count_ = 0;
    sum_ = 0.0;
  }
}

std::pair<double, double> WeightChangeTracker::window_means() const {
  if (windows_ < 2) throw InsufficientStatistics("window means need two complete windows");
  return {current_mean_, current_mean_ - previous_mean_};
}

}  // namespace cdmisfa
