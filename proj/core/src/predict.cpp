#include "corevi/predict.hpp"

#include "corevi/rng.hpp"
#include "corevi/tape.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>

namespace corevi {

namespace {

Coreset frozen_copy(const Coreset& c) {
  Coreset f = c;
  f.train_u = false;
  f.train_z = false;
  f.train_weights = false;
  f.train_alpha = false;
  return f;
}

}  // namespace

std::string eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.accuracy;
  j["nll_per_point_nats"] = r.nll;
  j["nll_presumed_unit"] = r.nll_presumed_unit;
  j["nll_presumed_unit_note"] = "per-point nats x 1000 / n_test; scale presumed, not published";
  j["ess"] = r.ess;
  j["mc_samples"] = r.mc_samples;
  j["seed"] = r.seed;
  j["n_test"] = r.n_test;
  return j.dump(2);
}

EvalReport eval_report_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  EvalReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.nll = j.at("nll_per_point_nats").get<double>();
  r.nll_presumed_unit = j.at("nll_presumed_unit").get<double>();
  r.ess = j.at("ess").get<double>();
  r.mc_samples = j.at("mc_samples").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_test = j.at("n_test").get<int>();
  return r;
}

PredictiveBatch predictive_batch(const Model& model, const VariationalGaussian& psi,
                                 const Coreset& c, const ad::Mat& x, const ad::Mat& noise,
                                 IwForm form) {
  if (x.rows() == 0) throw std::invalid_argument("predictive_batch: no input rows");
  if (noise.rows() < 1) throw std::invalid_argument("predictive_batch: need at least one sample");
  if (noise.cols() != model.param_count())
    throw std::invalid_argument("predictive_batch: noise width != parameter count");

  ad::Tape t;
  const VariationalNodes psin = register_variational(t, psi);
  const Coreset frozen = frozen_copy(c);
  const CoresetNodes nodes = register_coreset(t, frozen);
  const WeightedSampleBatch batch = importance_weights(t, model, psin, noise, frozen, nodes, form);

  PredictiveBatch out;
  out.w_tilde = t.value(batch.w_tilde);
  out.theta = t.value(batch.theta);
  if (!out.w_tilde.allFinite())
    throw std::runtime_error("predictive_batch: degenerate importance weights");

  const int k = batch.k;
  const int n = static_cast<int>(x.rows());
  const int classes = model.spec().classes;
  const ad::NodeId xn = t.constant(x);

  // Mix in the log domain: log p-hat = lse_k(log w~_k + log p_k), so a
  // confident sample cannot underflow the whole mixture entry.
  const double neg_inf = -std::numeric_limits<double>::infinity();
  ad::Mat running_max = ad::Mat::Constant(n, classes, neg_inf);
  std::vector<ad::Mat> terms(static_cast<size_t>(k));
  for (int s = 0; s < k; ++s) {
    const ad::NodeId row = t.block(batch.theta, s, 0, 1, model.param_count());
    const double log_w = std::log(out.w_tilde(s, 0));
    terms[static_cast<size_t>(s)] =
        t.value(model.log_class_probs(t, row, xn)).array() + log_w;
    running_max = running_max.cwiseMax(terms[static_cast<size_t>(s)]);
  }
  // Entries whose every term underflowed stay -inf (probability zero)
  // instead of producing -inf - -inf = NaN in the shifted sum.
  const ad::Mat shift = running_max.array().isFinite().select(running_max, ad::Mat::Zero(n, classes));
  ad::Mat sum = ad::Mat::Zero(n, classes);
  for (const ad::Mat& term : terms) sum.array() += (term - shift).array().exp();
  out.log_probs = shift.array() + sum.array().log();
  out.probs = out.log_probs.array().exp();
  if (out.probs.hasNaN())
    throw std::runtime_error("predictive_batch: non-finite predictive probabilities");
  return out;
}

ad::Mat posterior_predictive(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                             const ad::Mat& x, const ad::Mat& noise, IwForm form) {
  return predictive_batch(model, psi, c, x, noise, form).probs;
}

ad::Mat importance_average(const ad::Mat& f_rows, const ad::Mat& w_tilde) {
  if (w_tilde.cols() != 1) throw std::invalid_argument("importance_average: weights must be K x 1");
  if (f_rows.rows() != w_tilde.rows())
    throw std::invalid_argument("importance_average: row count != weight count");
  return w_tilde.transpose() * f_rows;
}

EvalReport evaluate(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                    const ad::Mat& x_test, const std::vector<int>& y_test, int mc_samples,
                    std::uint64_t seed, IwForm form) {
  const int n = static_cast<int>(x_test.rows());
  if (n == 0) throw std::invalid_argument("evaluate: empty test set");
  if (static_cast<int>(y_test.size()) != n)
    throw std::invalid_argument("evaluate: label count != row count");
  if (mc_samples < 1) throw std::invalid_argument("evaluate: mc_samples must be >= 1");
  const int classes = model.spec().classes;
  for (int label : y_test)
    if (label < 0 || label >= classes) throw std::invalid_argument("evaluate: label out of range");

  Rng rng = Rng::stream(seed, "eval");
  const ad::Mat noise = noise_matrix(rng, mc_samples, model.param_count());
  const PredictiveBatch batch = predictive_batch(model, psi, c, x_test, noise, form);

  int correct = 0;
  double nll_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    int arg = 0;
    for (int j = 1; j < classes; ++j)
      if (batch.probs(i, j) > batch.probs(i, arg)) arg = j;
    if (arg == y_test[static_cast<size_t>(i)]) ++correct;
    nll_sum -= batch.log_probs(i, y_test[static_cast<size_t>(i)]);
  }

  EvalReport r;
  r.accuracy = static_cast<double>(correct) / n;
  r.nll = nll_sum / n;
  r.nll_presumed_unit = r.nll * 1000.0 / n;
  r.ess = normalized_ess_value(batch.w_tilde);
  r.mc_samples = mc_samples;
  r.seed = seed;
  r.n_test = n;
  return r;
}

}  // namespace corevi
