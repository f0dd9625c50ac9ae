#include "corevi/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace corevi {

const char* to_string(IwForm form) {
  return form == IwForm::kJointRatio ? "joint-ratio" : "kl-diff";
}

IwForm iw_form_from_string(const std::string& s) {
  if (s == "joint-ratio") return IwForm::kJointRatio;
  if (s == "kl-diff") return IwForm::kKlDiff;
  throw std::runtime_error("unknown importance-weight form: " + s);
}

WeightedSampleBatch importance_weights(ad::Tape& t, const Model& model,
                                       const VariationalNodes& psi, const ad::Mat& noise,
                                       const Coreset& c, const CoresetNodes& nodes, IwForm form) {
  WeightedSampleBatch b;
  b.noise = noise;
  b.k = static_cast<int>(noise.rows());
  b.form = form;
  b.theta = sample_theta(t, psi, noise);
  b.wcll = weighted_coreset_loglik(t, model, b.theta, c, nodes);
  b.log_prior = model.log_prior(t, b.theta);
  b.log_r = log_density(t, psi, b.theta);
  if (form == IwForm::kJointRatio) {
    b.log_w = t.add(b.wcll, t.sub(b.log_prior, b.log_r));
  } else {
    b.log_w = t.sub(b.wcll, kl_to_prior(t, psi, model.prior_std_row()));
  }
  if (!t.value(b.log_w).array().isFinite().any())
    throw std::runtime_error("importance_weights: no finite log-weight in the batch");
  b.w_tilde = t.exp(t.log_softmax(b.log_w, ad::Axis::kAll));
  return b;
}

ad::NodeId normalized_ess(ad::Tape& t, ad::NodeId w_tilde) {
  const auto [k, one] = t.shape(w_tilde);
  (void)one;
  return t.reciprocal(t.scale(t.reduce_sum(t.square(w_tilde), ad::Axis::kAll),
                              static_cast<double>(k)));
}

double normalized_ess_value(const ad::Mat& w_tilde) {
  const double s2 = w_tilde.array().square().sum();
  return 1.0 / (static_cast<double>(w_tilde.size()) * s2);
}

ad::NodeId data_loglik_sum(ad::Tape& t, const Model& model, ad::NodeId theta, const ad::Mat& X,
                           const std::vector<int>& y) {
  const auto [k, p] = t.shape(theta);
  (void)p;
  if (X.rows() == 0) return t.constant(ad::Mat::Zero(k, 1));
  ad::NodeId xs = t.constant(X);
  return t.reduce_sum(model.loglik_matrix(t, theta, xs, y), ad::Axis::kCols);
}

namespace obj {

ad::NodeId elbo_classical_core(ad::Tape& t, ad::NodeId data_ll, double scale, ad::NodeId kl) {
  return t.sub(t.mean(t.scale(data_ll, scale), ad::Axis::kAll), kl);
}

ad::NodeId elbo_classical_mc_core(ad::Tape& t, ad::NodeId data_ll, double scale,
                                  ad::NodeId log_prior, ad::NodeId log_r) {
  ad::NodeId per_sample = t.add(t.scale(data_ll, scale), t.sub(log_prior, log_r));
  return t.mean(per_sample, ad::Axis::kAll);
}

ad::NodeId elbo_ip_core(ad::Tape& t, ad::NodeId wcll, ad::NodeId log_prior, ad::NodeId log_r) {
  return t.mean(t.add(wcll, t.sub(log_prior, log_r)), ad::Axis::kAll);
}

ad::NodeId elbo_is_core(ad::Tape& t, ad::NodeId w_tilde, ad::NodeId data_ll, double scale,
                        ad::NodeId wcll, ad::NodeId log_prior, ad::NodeId log_r) {
  ad::NodeId corrected = t.reduce_sum(t.mul(w_tilde, t.sub(t.scale(data_ll, scale), wcll)),
                                      ad::Axis::kAll);
  return t.add(corrected, elbo_ip_core(t, wcll, log_prior, log_r));
}

}  // namespace obj

ad::NodeId elbo_classical(ad::Tape& t, const Model& model, const VariationalNodes& psi,
                          ad::NodeId theta, ad::NodeId data_ll, double scale) {
  (void)theta;
  return obj::elbo_classical_core(t, data_ll, scale, kl_to_prior(t, psi, model.prior_std_row()));
}

ad::NodeId elbo_classical_mc(ad::Tape& t, const Model& model, const VariationalNodes& psi,
                             ad::NodeId theta, ad::NodeId data_ll, double scale) {
  return obj::elbo_classical_mc_core(t, data_ll, scale, model.log_prior(t, theta),
                                     log_density(t, psi, theta));
}

ad::NodeId elbo_ip(ad::Tape& t, const WeightedSampleBatch& batch) {
  return obj::elbo_ip_core(t, batch.wcll, batch.log_prior, batch.log_r);
}

ad::NodeId elbo_psvi_is_bb(ad::Tape& t, const WeightedSampleBatch& batch, ad::NodeId data_ll,
                           double scale, bool force_uniform_weights) {
  ad::NodeId w = force_uniform_weights
                     ? t.constant(ad::Mat::Constant(batch.k, 1, 1.0 / batch.k))
                     : batch.w_tilde;
  return obj::elbo_is_core(t, w, data_ll, scale, batch.wcll, batch.log_prior, batch.log_r);
}

ad::NodeId elbo_sparse_bbvi(ad::Tape& t, const WeightedSampleBatch& batch, ad::NodeId data_ll,
                            double scale, bool force_uniform_weights) {
  return elbo_psvi_is_bb(t, batch, data_ll, scale, force_uniform_weights);
}

ad::NodeId soft_label_term(ad::Tape& t, const Model& model, int point, const Coreset& c,
                           const CoresetNodes& nodes, const WeightedSampleBatch& batch) {
  if (!c.soft_labels) throw std::runtime_error("soft_label_term: coreset labels are hard");
  if (point < 0 || point >= c.size()) throw std::runtime_error("soft_label_term: point index");
  // K x M matrix holds -KL(p(.|z_i) || p(.|u_i, theta_k)) entries already.
  ad::NodeId ll = model.loglik_matrix_soft(t, batch.theta, nodes.u, nodes.label_probs,
                                           nodes.label_log_probs);
  ad::NodeId col = t.block(ll, 0, point, batch.k, 1);
  return t.negate(t.reduce_sum(t.mul(batch.w_tilde, col), ad::Axis::kAll));
}

}  // namespace corevi
