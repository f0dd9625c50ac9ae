#include "corevi/variational.hpp"

#include <cmath>
#include <stdexcept>

namespace corevi {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

VariationalGaussian VariationalGaussian::init(int param_count, double sigma0) {
  if (param_count <= 0) throw std::invalid_argument("variational: empty parameter vector");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("variational: sigma0 must be > 0");
  VariationalGaussian v;
  v.means = ad::Mat::Zero(1, param_count);
  v.log_stds = ad::Mat::Constant(1, param_count, std::log(sigma0));
  return v;
}

VariationalNodes register_variational(ad::Tape& t, const VariationalGaussian& psi,
                                      const std::string& prefix) {
  VariationalNodes n;
  n.means = t.variable(prefix + ".means", psi.means);
  n.log_stds = t.variable(prefix + ".log_stds", psi.log_stds);
  return n;
}

ad::Mat noise_matrix(Rng& rng, int k, int p) {
  ad::Mat eps(k, p);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < p; ++j) eps(i, j) = rng.normal();
  }
  return eps;
}

ad::NodeId sample_theta(ad::Tape& t, const VariationalNodes& psi, const ad::Mat& noise) {
  const auto [one, p] = t.shape(psi.means);
  (void)one;
  if (noise.cols() != p) throw std::invalid_argument("variational: noise length mismatch");
  const ad::NodeId eps = t.constant(noise);
  return t.add(t.mul(t.exp(psi.log_stds), eps), psi.means);
}

ad::NodeId log_density(ad::Tape& t, const VariationalNodes& psi, ad::NodeId theta) {
  const auto [one, p] = t.shape(psi.means);
  (void)one;
  if (t.shape(theta).second != p) throw std::invalid_argument("variational: length mismatch");
  const ad::NodeId std_dev = t.exp(psi.log_stds);
  const ad::NodeId standardized = t.div(t.sub(theta, psi.means), std_dev);
  const ad::NodeId quad = t.scale(t.reduce_sum(t.square(standardized), ad::Axis::kCols), -0.5);
  const ad::NodeId log_det = t.reduce_sum(psi.log_stds, ad::Axis::kAll);
  return t.add_scalar(t.sub(quad, log_det), -0.5 * static_cast<double>(p) * kLog2Pi);
}

ad::NodeId kl_to_prior(ad::Tape& t, const VariationalNodes& psi, const ad::Mat& prior_std_row) {
  const auto [one, p] = t.shape(psi.means);
  (void)one;
  if (prior_std_row.cols() != p) throw std::invalid_argument("variational: prior std mismatch");
  // Per-dim KL of Gaussians: ((sigma^2 + mu^2)/sigma0^2 - 1 + 2 log(sigma0/sigma)) / 2.
  const ad::NodeId var = t.square(t.exp(psi.log_stds));
  const ad::NodeId prior_var = t.constant(prior_std_row.array().square().matrix());
  const ad::NodeId ratio = t.div(t.add(var, t.square(psi.means)), prior_var);
  const ad::NodeId log_prior_std = t.constant(prior_std_row.array().log().matrix());
  const ad::NodeId log_term = t.scale(t.sub(log_prior_std, psi.log_stds), 2.0);
  const ad::NodeId per_dim = t.scale(t.add(t.add_scalar(ratio, -1.0), log_term), 0.5);
  return t.reduce_sum(per_dim, ad::Axis::kAll);
}

double kl_to_prior_value(const VariationalGaussian& psi, const ad::Mat& prior_std_row) {
  double kl = 0.0;
  for (int i = 0; i < psi.dim(); ++i) {
    const double s = std::exp(psi.log_stds(0, i));
    const double s0 = prior_std_row(0, i);
    const double mu = psi.means(0, i);
    kl += 0.5 * ((s * s + mu * mu) / (s0 * s0) - 1.0 + 2.0 * (std::log(s0) - std::log(s)));
  }
  return kl;
}

}  // namespace corevi
