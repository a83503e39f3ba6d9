#include "cdmisfa/gating.hpp"

#include <cmath>
#include <algorithm>
#include <numbers>

namespace cdmisfa {

namespace {

constexpr double kInvTwoPi = 1.0 / (2.0 * std::numbers::pi);

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

EtaInst eta_inst(const Eigen::MatrixXd& outputs, double var_floor) {
  const Eigen::Index n = outputs.rows();
  if (n < 2) throw std::invalid_argument("eta_inst needs at least two samples");
  EtaInst out;
  out.eta = Eigen::VectorXd::Zero(outputs.cols());
  out.degenerate.assign(outputs.cols(), false);
  for (Eigen::Index c = 0; c < outputs.cols(); ++c) {
    const auto y = outputs.col(c);
    const double mean = y.mean();
    const double var = (y.array() - mean).square().mean();
    const double ydot2 = (y.tail(n - 1) - y.head(n - 1)).squaredNorm() / static_cast<double>(n - 1);
    if (var < var_floor) {
      out.degenerate[c] = true;
      continue;
    }
    out.eta(c) = kInvTwoPi * std::sqrt(ydot2 / var);
  }
  return out;
}

StreamingEta::StreamingEta(int components) {
  if (components < 1) throw std::invalid_argument("StreamingEta needs at least one component");
  mean_ = m2_ = dsum_ = prev_ = Eigen::VectorXd::Zero(components);
}

void StreamingEta::push(const Eigen::VectorXd& y) {
  if (y.size() != mean_.size()) throw std::invalid_argument("StreamingEta: component count mismatch");
  ++n_;
  if (n_ > 1) dsum_ += (y - prev_).cwiseAbs2();
  prev_ = y;
  const Eigen::VectorXd d = y - mean_;
  mean_ += d / static_cast<double>(n_);
  m2_ += d.cwiseProduct(y - mean_);
}

void StreamingEta::reset() {
  n_ = 0;
  mean_.setZero();
  m2_.setZero();
  dsum_.setZero();
}

Eigen::VectorXd StreamingEta::eta(double var_floor) const {
  if (n_ < 2) throw std::logic_error("StreamingEta needs at least two samples");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(mean_.size());
  for (Eigen::Index c = 0; c < out.size(); ++c) {
    const double var = m2_(c) / static_cast<double>(n_);
    if (var < var_floor) continue;
    out(c) = kInvTwoPi * std::sqrt(dsum_(c) / static_cast<double>(n_ - 1) / var);
  }
  return out;
}

// ---------------------------------------------------------------------------

EtaStats::EtaStats(int components, GatingParams params, int tau) : params_(params) {
  if (components < 1) throw std::invalid_argument("EtaStats needs at least one component");
  if (params_.ema_stages < 1) throw std::invalid_argument("ema_stages must be at least 1");
  inst_rate_ = params_.inst_rate > 0.0 ? params_.inst_rate : 1.0 - std::pow(1.0 - params_.ema_rate, tau);
  ydot2_stages_.assign(params_.ema_stages - 1, Eigen::VectorXd::Zero(components));
  var_stages_.assign(params_.ema_stages - 1, Eigen::VectorXd::Zero(components));
  ydot2_ = mean_ = var_ = Eigen::VectorXd::Zero(components);
  eta_ = eta_prev_ = eta_dot_ = Eigen::VectorXd::Zero(components);
  degenerate_.assign(components, true);
  inst_mean_ = inst_var_ = Eigen::VectorXd::Zero(components);
  inst_counts_.assign(components, 0);
}

void EtaStats::update(const Eigen::MatrixXd& outputs, const Eigen::VectorXd* prev_output) {
  if (outputs.rows() == 0) return;
  if (outputs.cols() != components()) throw std::invalid_argument("EtaStats: component count mismatch");
  const double a = params_.ema_rate;
  bool have_deriv = prev_output != nullptr;
  Eigen::VectorXd prev = have_deriv ? *prev_output : Eigen::VectorXd();
  for (Eigen::Index r = 0; r < outputs.rows(); ++r) {
    const Eigen::VectorXd y = outputs.row(r).transpose();
    if (!ema_started_) {
      mean_ = y;
      var_.setZero();
      for (auto& v : var_stages_) v.setZero();
      ema_started_ = true;
    } else {
      const Eigen::VectorXd d = y - mean_;
      mean_ += a * d;
      var_ = (1.0 - a) * (var_ + a * d.cwiseProduct(d));
      const Eigen::VectorXd* in = &var_;
      for (auto& v : var_stages_) {
        v = (1.0 - a) * v + a * *in;
        in = &v;
      }
    }
    if (have_deriv) {
      const Eigen::VectorXd dy = y - prev;
      if (!deriv_started_) {
        ydot2_ = dy.cwiseProduct(dy);
        for (auto& v : ydot2_stages_) v = ydot2_;
        deriv_started_ = true;
      } else {
        ydot2_ = (1.0 - a) * ydot2_ + a * dy.cwiseProduct(dy);
        const Eigen::VectorXd* in = &ydot2_;
        for (auto& v : ydot2_stages_) {
          v = (1.0 - a) * v + a * *in;
          in = &v;
        }
      }
    }
    prev = y;
    have_deriv = true;
  }

  eta_prev_ = eta_;
  const Eigen::VectorXd& ydot2 = ydot2_stages_.empty() ? ydot2_ : ydot2_stages_.back();
  const Eigen::VectorXd& var = var_stages_.empty() ? var_ : var_stages_.back();
  for (int c = 0; c < components(); ++c) {
    degenerate_[c] = var(c) < params_.var_floor;
    eta_(c) = degenerate_[c] ? 0.0 : kInvTwoPi * std::sqrt(ydot2(c) / var(c));
  }
  ++batches_;
  if (batches_ >= 2) eta_dot_ = eta_ - eta_prev_;

  if (batches_ >= 2) {
    recent_.push_back({eta_dot_, degenerate_});
    if (static_cast<int>(recent_.size()) > std::max(1, params_.settle_batches)) recent_.pop_front();
    settled_ = small_eta_dot(recent_.back(), params_.delta) ? settled_ + 1 : 0;
  }

  if (outputs.rows() >= 2) {
    last_inst_ = eta_inst(outputs, params_.var_floor);
    if (params_.inst_window > 0) {
      inst_window_.push_back(last_inst_);
      if (static_cast<int>(inst_window_.size()) > params_.inst_window) inst_window_.pop_front();
      refresh_window_stats();
      return;
    }
    for (int c = 0; c < components(); ++c) {
      if (last_inst_.degenerate[c]) continue;
      const double v = last_inst_.eta(c);
      if (inst_counts_[c]++ == 0) {
        inst_mean_(c) = v;
        inst_var_(c) = 0.0;
      } else {
        const double d = v - inst_mean_(c);
        inst_mean_(c) += inst_rate_ * d;
        inst_var_(c) = (1.0 - inst_rate_) * (inst_var_(c) + inst_rate_ * d * d);
      }
    }
  }
}

void EtaStats::refresh_window_stats() {
  for (int c = 0; c < components(); ++c) {
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (const auto& e : inst_window_) {
      if (e.degenerate[c]) continue;
      sum += e.eta(c);
      ++n;
    }
    inst_counts_[c] = n;
    if (n == 0) {
      inst_mean_(c) = inst_var_(c) = 0.0;
      continue;
    }
    const double mean = sum / n;
    for (const auto& e : inst_window_)
      if (!e.degenerate[c]) sq += (e.eta(c) - mean) * (e.eta(c) - mean);
    inst_mean_(c) = mean;
    inst_var_(c) = n > 1 ? sq / (n - 1) : 0.0;
  }
}

bool EtaStats::small_eta_dot(const Record& r, double delta) {
  bool any = false;
  for (Eigen::Index c = 0; c < r.eta_dot.size(); ++c) {
    if (r.degenerate[c]) continue;
    any = true;
    if (!(std::abs(r.eta_dot(c)) < delta)) return false;
  }
  return any;
}

bool EtaStats::converged(double delta) const {
  const int need = std::max(1, params_.settle_batches);
  if (static_cast<int>(recent_.size()) < need) return false;
  for (const auto& r : recent_)
    if (!small_eta_dot(r, delta)) return false;
  if (params_.eta_ceiling > 0.0)
    for (int c = 0; c < components(); ++c)
      if (!degenerate_[c] && !(eta_(c) < params_.eta_ceiling)) return false;
  return true;
}

Eigen::VectorXd EtaStats::inst_sd() const { return inst_var_.cwiseMax(0.0).cwiseSqrt(); }

int EtaStats::degenerate_count() const {
  int n = 0;
  for (bool d : degenerate_) n += d ? 1 : 0;
  return n;
}

// ---------------------------------------------------------------------------

FrozenAbstraction::FrozenAbstraction(LinearExtractor extractor, Eigen::VectorXd eta_mean, Eigen::VectorXd eta_sd,
                                     std::vector<bool> degenerate, Provenance provenance, Eigen::VectorXd final_eta)
    : extractor_(std::move(extractor)),
      eta_mean_(std::move(eta_mean)),
      eta_sd_(std::move(eta_sd)),
      degenerate_(std::move(degenerate)),
      provenance_(std::move(provenance)),
      final_eta_(std::move(final_eta)) {
  const auto j = extractor_.matrix.rows();
  if (eta_mean_.size() != j || eta_sd_.size() != j || static_cast<Eigen::Index>(degenerate_.size()) != j)
    throw std::invalid_argument("frozen abstraction statistics do not match output dimension");
}

bool FrozenAbstraction::knows(const ObservationBatch& batch, double band_width, double var_floor) const {
  if (batch.dim() != input_dim()) throw std::invalid_argument("batch dimension does not match abstraction");
  const EtaInst e = eta_inst(outputs(batch.samples), var_floor);
  bool any = false;
  for (int c = 0; c < output_dim(); ++c) {
    if (degenerate_[c]) continue;
    any = true;
    if (e.degenerate[c]) return false;
    if (std::abs(e.eta(c) - eta_mean_(c)) > band_width * eta_sd_(c)) return false;
  }
  return any;
}

FrozenAbstraction FrozenAbstraction::with_encoded_streams(std::vector<int> streams) const {
  FrozenAbstraction copy = *this;
  copy.provenance_.encoded_streams = std::move(streams);
  return copy;
}

nlohmann::json FrozenAbstraction::to_json() const {
  nlohmann::json j;
  j["format"] = "cdmisfa-frozen";
  j["input_dim"] = input_dim();
  j["output_dim"] = output_dim();
  j["mean"] = vec_json(extractor_.mean);
  std::vector<std::vector<double>> rows;
  for (Eigen::Index r = 0; r < extractor_.matrix.rows(); ++r) {
    const Eigen::VectorXd row = extractor_.matrix.row(r).transpose();
    rows.emplace_back(row.data(), row.data() + row.size());
  }
  j["matrix"] = rows;
  j["eta_inst_mean"] = vec_json(eta_mean_);
  j["eta_inst_sd"] = vec_json(eta_sd_);
  j["degenerate"] = degenerate_;
  j["final_eta"] = vec_json(final_eta_);
  j["provenance"] = {{"index", provenance_.index},
                     {"iteration", provenance_.iteration},
                     {"trained_stream", provenance_.trained_stream},
                     {"encoded_streams", provenance_.encoded_streams}};
  return j;
}

FrozenAbstraction FrozenAbstraction::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cdmisfa-frozen") throw std::invalid_argument("not a frozen abstraction document");
  const int in = j.at("input_dim").get<int>();
  const int out = j.at("output_dim").get<int>();
  LinearExtractor ex;
  ex.mean = json_vec(j.at("mean"));
  ex.matrix.resize(out, in);
  const auto& rows = j.at("matrix");
  if (static_cast<int>(rows.size()) != out || ex.mean.size() != in)
    throw std::invalid_argument("frozen abstraction has inconsistent dimensions");
  for (int r = 0; r < out; ++r) {
    if (static_cast<int>(rows.at(r).size()) != in) throw std::invalid_argument("frozen abstraction row size mismatch");
    for (int c = 0; c < in; ++c) ex.matrix(r, c) = rows.at(r).at(c).get<double>();
  }
  Provenance p;
  const auto& pj = j.at("provenance");
  p.index = pj.at("index").get<int>();
  p.iteration = pj.at("iteration").get<std::int64_t>();
  p.trained_stream = pj.at("trained_stream").get<int>();
  p.encoded_streams = pj.at("encoded_streams").get<std::vector<int>>();
  return FrozenAbstraction(std::move(ex), json_vec(j.at("eta_inst_mean")), json_vec(j.at("eta_inst_sd")),
                           j.at("degenerate").get<std::vector<bool>>(), std::move(p), json_vec(j.at("final_eta")));
}

FrozenAbstraction freeze(const AdaptiveAbstraction& abstraction, const EtaStats& stats, const GatingParams& params,
                         Provenance provenance, const std::vector<Eigen::MatrixXd>& recent) {
  const LinearExtractor ex = abstraction.extractor();
  Eigen::VectorXd mean = stats.inst_mean();
  Eigen::VectorXd sd = stats.inst_sd();
  std::vector<bool> degenerate = stats.degenerate();
  if (params.rescore_band && !recent.empty()) {
    const int j = abstraction.output_dim();
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(j), sq = Eigen::VectorXd::Zero(j);
    std::vector<int> n(j, 0);
    std::vector<EtaInst> scored;
    for (const auto& b : recent) {
      if (b.rows() < 2) continue;
      scored.push_back(eta_inst(ex.apply_rows(b), params.var_floor));
      for (int c = 0; c < j; ++c)
        if (!scored.back().degenerate[c]) {
          sum(c) += scored.back().eta(c);
          ++n[c];
        }
    }
    for (int c = 0; c < j; ++c) {
      degenerate[c] = n[c] == 0;
      mean(c) = n[c] > 0 ? sum(c) / n[c] : 0.0;
    }
    for (const auto& e : scored)
      for (int c = 0; c < j; ++c)
        if (!e.degenerate[c]) sq(c) += (e.eta(c) - mean(c)) * (e.eta(c) - mean(c));
    for (int c = 0; c < j; ++c) sd(c) = n[c] > 1 ? std::sqrt(sq(c) / (n[c] - 1)) : 0.0;
  }
  sd = sd.cwiseMax(params.sd_floor);
  return FrozenAbstraction(ex, std::move(mean), std::move(sd), std::move(degenerate), std::move(provenance),
                           stats.eta());
}

nlohmann::json AbstractionLibrary::to_json() const {
  nlohmann::json j;
  j["format"] = "cdmisfa-library";
  j["version"] = 1;
  j["abstractions"] = nlohmann::json::array();
  for (const auto& f : items_) j["abstractions"].push_back(f.to_json());
  return j;
}

AbstractionLibrary AbstractionLibrary::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cdmisfa-library") throw std::invalid_argument("not a library manifest");
  AbstractionLibrary lib;
  for (const auto& a : j.at("abstractions")) lib.append(FrozenAbstraction::from_json(a));
  return lib;
}

bool is_constant(const ObservationBatch& batch) {
  for (Eigen::Index r = 1; r < batch.samples.rows(); ++r)
    if (batch.samples.row(r) != batch.samples.row(0)) return false;
  return true;
}

bool is_novel(const ObservationBatch& batch, const AbstractionLibrary& library, const GatingParams& params) {
  for (const auto& f : library) {
    if (f.knows(batch, params.band_width, params.var_floor)) return false;
  }
  return true;
}

}  // namespace cdmisfa
