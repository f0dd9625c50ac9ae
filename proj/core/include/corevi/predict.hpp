#pragma once

#include "corevi/coreset.hpp"
#include "corevi/model.hpp"
#include "corevi/objectives.hpp"
#include "corevi/variational.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace corevi {

struct EvalReport {
  double accuracy = 0.0;
  double nll = 0.0;  // mean negative log-likelihood per test point, nats
  // Published tables use an unstated NLL scale; this field applies the
  // presumed conversion x1000/N_test and is flagged as presumed in JSON.
  double nll_presumed_unit = 0.0;
  double ess = 0.0;
  int mc_samples = 0;
  std::uint64_t seed = 0;
  int n_test = 0;
};

std::string eval_report_to_json(const EvalReport& r);
EvalReport eval_report_from_json(const std::string& text);

// One importance-corrected sample batch shared by every prediction row.
struct PredictiveBatch {
  ad::Mat log_probs;  // N x C, log of the corrected predictive
  ad::Mat probs;      // N x C, rows sum to 1
  ad::Mat w_tilde;    // K x 1
  ad::Mat theta;      // K x P
};

PredictiveBatch predictive_batch(const Model& model, const VariationalGaussian& psi,
                                 const Coreset& c, const ad::Mat& x, const ad::Mat& noise,
                                 IwForm form = IwForm::kJointRatio);

// p-hat(y | x) = sum_k w~_k p(y | x, theta_k), mixed in the log domain.
ad::Mat posterior_predictive(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                             const ad::Mat& x, const ad::Mat& noise,
                             IwForm form = IwForm::kJointRatio);

// w~-weighted average of per-sample rows (E_q[f] corrected by the batch
// weights): f_rows is K x Q, w_tilde K x 1; returns 1 x Q.
ad::Mat importance_average(const ad::Mat& f_rows, const ad::Mat& w_tilde);

// Shared-theta-batch evaluation: accuracy by predictive argmax, per-point
// NLL in nats, and the batch ESS. Noise is drawn from stream(seed, "eval").
EvalReport evaluate(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                    const ad::Mat& x_test, const std::vector<int>& y_test, int mc_samples,
                    std::uint64_t seed, IwForm form = IwForm::kJointRatio);

}  // namespace corevi
