#include "oracles.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

namespace oracle {

Eigen::MatrixXd BatchSfa::apply(const Eigen::MatrixXd& samples) const {
  return (samples.rowwise() - mean.transpose()) * weights.transpose();
}

BatchSfa batch_sfa(const Eigen::MatrixXd& samples, int j) {
  const Eigen::Index n = samples.rows(), dim = samples.cols();
  if (n < dim + 1) throw std::invalid_argument("batch_sfa: too few samples");
  if (j < 1 || j > dim) throw std::invalid_argument("batch_sfa: bad output count");
  BatchSfa out;
  out.mean = samples.colwise().mean().transpose();
  const Eigen::MatrixXd centered = samples.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> pca(cov);
  const Eigen::VectorXd lam = pca.eigenvalues();
  if (!(lam.minCoeff() > 1e-10 * std::max(1.0, lam.maxCoeff())))
    throw std::runtime_error("batch_sfa: singular covariance");
  out.whitening = lam.cwiseSqrt().cwiseInverse().asDiagonal() * pca.eigenvectors().transpose();

  const Eigen::MatrixXd z = centered * out.whitening.transpose();
  const Eigen::MatrixXd zdot = z.bottomRows(n - 1) - z.topRows(n - 1);
  const Eigen::MatrixXd dcov = zdot.transpose() * zdot / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> slow(dcov);
  out.weights = slow.eigenvectors().leftCols(j).transpose() * out.whitening;
  out.eta.resize(j);
  const Eigen::MatrixXd y = out.apply(samples);
  for (int c = 0; c < j; ++c) out.eta(c) = two_pass_eta(y.col(c));
  return out;
}

double two_pass_eta(const Eigen::VectorXd& y) {
  const Eigen::Index n = y.size();
  if (n < 2) throw std::invalid_argument("two_pass_eta: need two samples");
  double mean = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) mean += y(i);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) var += (y(i) - mean) * (y(i) - mean);
  var /= static_cast<double>(n);
  double d2 = 0.0;
  for (Eigen::Index i = 1; i < n; ++i) d2 += (y(i) - y(i - 1)) * (y(i) - y(i - 1));
  d2 /= static_cast<double>(n - 1);
  return std::sqrt(d2 / var) / (2.0 * std::numbers::pi);
}

Eigen::MatrixXd value_iteration(const Eigen::MatrixXd& r, double discount, double tol) {
  const Eigen::Index n = r.rows();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, 2);
  for (int it = 0; it < 100000; ++it) {
    const Eigen::VectorXd v = q.rowwise().maxCoeff();
    Eigen::MatrixXd next(n, 2);
    for (Eigen::Index s = 0; s < n; ++s) {
      next(s, 0) = r(s, 0) + discount * v(s);
      double other = 0.0;
      for (Eigen::Index k = 0; k < n; ++k)
        if (k != s) other += v(k);
      next(s, 1) = r(s, 1) + discount * other / static_cast<double>(n - 1);
    }
    const double change = (next - q).cwiseAbs().maxCoeff();
    q = next;
    if (change < tol) break;
  }
  return q;
}

double chi_square_uniform_p(const std::vector<std::int64_t>& counts) {
  if (counts.size() < 2) throw std::invalid_argument("chi-square needs two cells");
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double stat = 0.0;
  for (auto c : counts) stat += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

std::pair<double, double> binomial_interval(std::int64_t k, std::int64_t n, double alpha) {
  using B = boost::math::binomial;
  const double lo = B::find_lower_bound_on_p(static_cast<double>(n), static_cast<double>(k), alpha / 2);
  const double hi = B::find_upper_bound_on_p(static_cast<double>(n), static_cast<double>(k), alpha / 2);
  return {lo, hi};
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd x = a.array() - a.mean();
  const Eigen::VectorXd y = b.array() - b.mean();
  return x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm());
}

}  // namespace oracle
