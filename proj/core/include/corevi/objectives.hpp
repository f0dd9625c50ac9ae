#pragma once

#include "corevi/coreset.hpp"
#include "corevi/model.hpp"
#include "corevi/tape.hpp"
#include "corevi/variational.hpp"

#include <vector>

namespace corevi {

// How the raw log importance weights are formed.
//   kJointRatio: log w_k = wcll_k + log p(theta_k) - log r(theta_k)
//   kKlDiff:     log w_k = wcll_k - KL(r || prior)   (analytic-KL shortcut)
enum class IwForm { kJointRatio, kKlDiff };

const char* to_string(IwForm form);
IwForm iw_form_from_string(const std::string& s);

// One batch of K reparameterized samples plus everything the objectives
// need per sample. All K x 1 columns share the theta node.
struct WeightedSampleBatch {
  ad::NodeId theta = ad::kNoNode;      // K x P
  ad::NodeId wcll = ad::kNoNode;       // K x 1 weighted coreset log-lik
  ad::NodeId log_prior = ad::kNoNode;  // K x 1
  ad::NodeId log_r = ad::kNoNode;      // K x 1 variational log-density
  ad::NodeId log_w = ad::kNoNode;      // K x 1 raw log-weights
  ad::NodeId w_tilde = ad::kNoNode;    // K x 1, sums to 1
  ad::Mat noise;                       // K x P epsilon draws
  int k = 0;
  IwForm form = IwForm::kJointRatio;
};

// Samples theta from psi with the given noise and assembles the batch;
// gradients flow into psi and every trainable coreset field.
WeightedSampleBatch importance_weights(ad::Tape& t, const Model& model,
                                       const VariationalNodes& psi, const ad::Mat& noise,
                                       const Coreset& c, const CoresetNodes& nodes,
                                       IwForm form = IwForm::kJointRatio);

// 1/(K sum w~^2), in (0, 1]; 1 for uniform weights.
ad::NodeId normalized_ess(ad::Tape& t, ad::NodeId w_tilde);
double normalized_ess_value(const ad::Mat& w_tilde);

// K x 1 column of sum_{i in batch} log p(y_i | x_i, theta_k), unscaled.
ad::NodeId data_loglik_sum(ad::Tape& t, const Model& model, ad::NodeId theta, const ad::Mat& X,
                           const std::vector<int>& y);

// Node-level objective cores. data_ll / wcll / log_prior / log_r are K x 1;
// kl is a 1 x 1 analytic KL(r || prior). All return 1 x 1 nodes.
namespace obj {

// mean_k(scale * data_ll_k) - kl
ad::NodeId elbo_classical_core(ad::Tape& t, ad::NodeId data_ll, double scale, ad::NodeId kl);

// mean_k(scale * data_ll_k + log_prior_k - log_r_k)
ad::NodeId elbo_classical_mc_core(ad::Tape& t, ad::NodeId data_ll, double scale,
                                  ad::NodeId log_prior, ad::NodeId log_r);

// mean_k(wcll_k + log_prior_k - log_r_k)
ad::NodeId elbo_ip_core(ad::Tape& t, ad::NodeId wcll, ad::NodeId log_prior, ad::NodeId log_r);

// sum_k w~_k (scale * data_ll_k - wcll_k) + mean_k(wcll_k + log_prior_k - log_r_k)
ad::NodeId elbo_is_core(ad::Tape& t, ad::NodeId w_tilde, ad::NodeId data_ll, double scale,
                        ad::NodeId wcll, ad::NodeId log_prior, ad::NodeId log_r);

}  // namespace obj

// Reparameterized ELBO with analytic Gaussian KL against the model prior.
ad::NodeId elbo_classical(ad::Tape& t, const Model& model, const VariationalNodes& psi,
                          ad::NodeId theta, ad::NodeId data_ll, double scale);

// Same bound with the per-sample log p - log r estimate of the KL.
ad::NodeId elbo_classical_mc(ad::Tape& t, const Model& model, const VariationalNodes& psi,
                             ad::NodeId theta, ad::NodeId data_ll, double scale);

// Coreset-evidence bound: the inner objective of the nested scheme.
ad::NodeId elbo_ip(ad::Tape& t, const WeightedSampleBatch& batch);

// Importance-corrected data-evidence bound: the outer objective.
// force_uniform_weights replaces w~ with 1/K (testing hook; with it the
// value collapses to elbo_classical_mc).
ad::NodeId elbo_psvi_is_bb(ad::Tape& t, const WeightedSampleBatch& batch, ad::NodeId data_ll,
                           double scale, bool force_uniform_weights = false);

// Outer bound over a fixed data subset: identical algebra, the caller
// freezes locations via the coreset's trainable flags.
ad::NodeId elbo_sparse_bbvi(ad::Tape& t, const WeightedSampleBatch& batch, ad::NodeId data_ll,
                            double scale, bool force_uniform_weights = false);

// w~-weighted estimate of E_q[KL(p(.|z_m) || p(.|u_m, theta))] for one soft
// coreset point; the (positive) penalty whose negation enters the bound.
ad::NodeId soft_label_term(ad::Tape& t, const Model& model, int point, const Coreset& c,
                           const CoresetNodes& nodes, const WeightedSampleBatch& batch);

}  // namespace corevi
