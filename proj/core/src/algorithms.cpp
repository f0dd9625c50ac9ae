#include "corevi/algorithms.hpp"

#include "corevi/objectives.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace corevi {

using ad::Mat;

namespace {

Mat take_rows(const Mat& x, const std::vector<std::size_t>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

std::vector<int> take_labels(const std::vector<int>& y, const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
  return out;
}

double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

void check_data(const Mat& x, const std::vector<int>& y) {
  if (x.rows() == 0) throw std::invalid_argument("empty dataset");
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw std::invalid_argument("feature rows and label count differ");
  }
}

void fire_eval(const EvalHook& eval, int iter, const Coreset& c, const VariationalGaussian& psi,
               TrainTrace& trace) {
  if (!eval) return;
  if (!trace.evals.empty() && trace.evals.back().iter == iter) return;
  eval(iter, c, psi, trace);
}

// One bilevel outer iteration per call: minibatch draw, driver step,
// trace row, cadenced evaluation. iter counts globally across phases.
void run_driver_loop(BilevelDriver& driver, const Mat& x, const std::vector<int>& y, int iters,
                     int& iter, Rng& batch_rng, Rng& noise_rng, const TrainConfig& cfg,
                     const EvalHook& eval, TrainTrace& trace) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(driver.config().batch_size), n);
  for (int i = 0; i < iters; ++i) {
    const auto idx = batch_rng.sample_without_replacement(n, b);
    const Mat xb = take_rows(x, idx);
    const auto yb = take_labels(y, idx);
    const auto t0 = std::chrono::steady_clock::now();
    const auto diag = driver.step(xb, yb, noise_rng);
    ++iter;
    trace.steps.push_back({iter, diag.outer_loss, diag.inner_last, diag.ess, ms_since(t0)});
    if (cfg.eval_every > 0 && iter % cfg.eval_every == 0) {
      fire_eval(eval, iter, driver.coreset(), driver.psi(), trace);
    }
  }
}

void configure_weight_mode(Coreset& c, WeightMode mode) {
  c.mode = mode;
  c.train_weights = mode == WeightMode::kFreeNonneg || mode == WeightMode::kSoftmax ||
                    mode == WeightMode::kSoftmaxAlpha;
  c.train_alpha = mode == WeightMode::kSoftmaxAlpha;
}

void enable_soft_labels(Coreset& c, int classes, double init_logit) {
  c.soft_labels = true;
  c.train_z = true;
  c.z_logits = Mat::Zero(c.size(), classes);
  for (int m = 0; m < c.size(); ++m) c.z_logits(m, c.z[m]) = init_logit;
}

// Classical bound on the weighted coreset: mean_k(wcll_k) - KL(r || prior).
// The coreset enters as constants; only psi trains.
ElboBuilder coreset_posterior_elbo(const Model& model, Coreset c) {
  c.train_u = c.train_z = c.train_weights = c.train_alpha = false;
  return [&model, c = std::move(c)](ad::Tape& t, const VariationalNodes& psi, const Mat& noise) {
    const auto nodes = register_coreset(t, c);
    const auto theta = sample_theta(t, psi, noise);
    const auto wcll = weighted_coreset_loglik(t, model, theta, c, nodes);
    const auto kl = kl_to_prior(t, psi, model.prior_std_row());
    return obj::elbo_classical_core(t, wcll, 1.0, kl);
  };
}

void append_fit_rows(TrainTrace& trace, int& iter, const std::vector<double>& elbo_trace,
                     double total_ms) {
  const double avg = elbo_trace.empty() ? 0.0 : total_ms / static_cast<double>(elbo_trace.size());
  for (const double e : elbo_trace) {
    ++iter;
    trace.steps.push_back({iter, -e, -e, 1.0, avg});
  }
}

// Shared by the batch trainer and pruning round 0 so a one-size schedule
// reproduces the batch run exactly.
Coreset batch_subset_coreset(const Model& model, const Mat& x, const std::vector<int>& y, int m,
                             std::uint64_t seed) {
  Coreset c = init_coreset(InitStrategy::kSubset, x, y, m, model.spec().classes, seed);
  c.model_hash = model.spec().hash();
  configure_weight_mode(c, WeightMode::kFreeNonneg);
  c.train_u = false;
  c.train_z = false;
  return c;
}

void append_point(Coreset& c, const Eigen::RowVectorXd& xrow, int label) {
  const int m = c.size();
  c.u.conservativeResize(m + 1, Eigen::NoChange);
  c.u.row(m) = xrow;
  c.z.push_back(label);
  c.v_raw.conservativeResize(1, m + 1);
  c.v_raw(0, m) = 0.0;
  c.beta.conservativeResize(1, m + 1);
  c.beta(0, m) = 0.0;
}

Coreset empty_free_coreset(const Model& model, const Mat& x, std::uint64_t seed) {
  Coreset c;
  c.u = Mat(0, x.cols());
  c.beta = Mat::Zero(1, 0);
  c.v_raw = Mat::Zero(1, 0);
  c.n_data = static_cast<double>(x.rows());
  c.seed = seed;
  c.model_hash = model.spec().hash();
  configure_weight_mode(c, WeightMode::kFreeNonneg);
  c.train_u = false;
  c.train_z = false;
  return c;
}

}  // namespace

Mat loglik_values(const Model& model, const Mat& theta_samples, const Mat& x,
                  const std::vector<int>& y) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw std::invalid_argument("feature rows and label count differ");
  }
  if (x.rows() == 0) return Mat(theta_samples.rows(), 0);
  ad::Tape t;
  const auto theta = t.constant(theta_samples);
  const auto xn = t.constant(x);
  return t.value(model.loglik_matrix(t, theta, xn, y));
}

Mat centered_loglik(const Mat& ll, const Mat* w_tilde) {
  if (ll.rows() == 0 || ll.cols() == 0) return ll;
  Eigen::RowVectorXd center;
  if (w_tilde != nullptr) {
    if (w_tilde->cols() != 1 || w_tilde->rows() != ll.rows()) {
      throw std::invalid_argument("w_tilde must be K x 1");
    }
    if (std::abs(w_tilde->sum() - 1.0) > 1e-6) {
      throw std::invalid_argument("w_tilde must sum to 1");
    }
    center = w_tilde->col(0).transpose() * ll;
  } else {
    center = ll.colwise().mean();
  }
  return ll.rowwise() - center;
}

GreedyStats greedy_stats(const Mat& core_ll, const Mat& batch_ll, const Mat& v, double n_over_b,
                         const Mat* w_tilde) {
  if (core_ll.rows() != batch_ll.rows()) {
    throw std::invalid_argument("coreset and minibatch sample counts differ");
  }
  if (v.rows() != 1 || v.cols() != core_ll.cols()) {
    throw std::invalid_argument("weights must be 1 x M");
  }
  const auto k = batch_ll.rows();
  if (k == 0) throw std::invalid_argument("at least one posterior sample required");
  Eigen::RowVectorXd wrow;
  if (w_tilde != nullptr) {
    wrow = w_tilde->col(0).transpose();  // shape/sum checked by centered_loglik
  } else {
    wrow = Eigen::RowVectorXd::Constant(k, 1.0 / static_cast<double>(k));
  }
  GreedyStats s;
  s.g = centered_loglik(core_ll, w_tilde);
  s.gp = centered_loglik(batch_ll, w_tilde);
  s.residual = n_over_b * s.gp.rowwise().sum() - s.g * v.transpose();
  const auto corr_of = [&](const Mat& g) {
    Mat corr(1, g.cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      double num = 0.0;
      double den = 0.0;
      for (Eigen::Index row = 0; row < k; ++row) {
        num += wrow(row) * g(row, c) * s.residual(row, 0);
        den += wrow(row) * g(row, c) * g(row, c);
      }
      // A zero-variance column carries no signal; score it 0 rather than 0/0.
      corr(0, c) = den > 1e-300 ? num / std::sqrt(den) : 0.0;
    }
    return corr;
  };
  s.corr_core = corr_of(s.g);
  s.corr_batch = corr_of(s.gp);
  return s;
}

Selection greedy_select(const GreedyStats& stats, const Mat& v) {
  const auto m = stats.corr_core.cols();
  const auto b = stats.corr_batch.cols();
  if (m + b == 0) throw std::invalid_argument("greedy_select: empty candidate pool");
  Selection best;
  bool have = false;
  for (Eigen::Index c = 0; c < m; ++c) {
    const double score =
        v(0, c) > 0.0 ? std::abs(stats.corr_core(0, c)) : stats.corr_core(0, c);
    if (!have || score > best.score) {
      best = {true, static_cast<int>(c), score};
      have = true;
    }
  }
  for (Eigen::Index j = 0; j < b; ++j) {
    const double score = stats.corr_batch(0, j);
    if (score > best.score || !have) {
      best = {false, static_cast<int>(j), score};
      have = true;
    }
  }
  return best;
}

Mat sparse_vi_weight_gradient(const GreedyStats& stats) {
  const double s = static_cast<double>(stats.residual.rows());
  return (-(stats.g.transpose() * stats.residual) / s).transpose();
}

TrainResult train_bb_psvi(const Model& model, const Mat& x, const std::vector<int>& y,
                          const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  cfg.bilevel.validate();
  Coreset c = init_coreset(cfg.init, x, y, cfg.coreset_size, model.spec().classes, cfg.seed);
  c.model_hash = model.spec().hash();
  configure_weight_mode(c, cfg.mode);
  c.train_u = true;
  if (cfg.soft_labels) enable_soft_labels(c, model.spec().classes, cfg.soft_init_logit);
  const auto psi0 = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  BilevelDriver driver(model, std::move(c), psi0, cfg.bilevel);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  TrainTrace trace;
  int iter = 0;
  run_driver_loop(driver, x, y, cfg.bilevel.outer_iters, iter, batch_rng, noise_rng, cfg, eval,
                  trace);
  fire_eval(eval, iter, driver.coreset(), driver.psi(), trace);
  return {driver.coreset(), driver.psi(), std::move(trace)};
}

TrainResult train_bb_psvi_from(const Model& model, const Mat& x, const std::vector<int>& y,
                               Coreset initial, const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  cfg.bilevel.validate();
  if (initial.dim() != static_cast<int>(x.cols()))
    throw std::invalid_argument("initial coreset dimension != data dimension");
  initial.model_hash = model.spec().hash();
  const auto psi0 = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  BilevelDriver driver(model, std::move(initial), psi0, cfg.bilevel);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  TrainTrace trace;
  int iter = 0;
  run_driver_loop(driver, x, y, cfg.bilevel.outer_iters, iter, batch_rng, noise_rng, cfg, eval,
                  trace);
  fire_eval(eval, iter, driver.coreset(), driver.psi(), trace);
  return {driver.coreset(), driver.psi(), std::move(trace)};
}

TrainResult train_bb_sparse_batch(const Model& model, const Mat& x, const std::vector<int>& y,
                                  const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  cfg.bilevel.validate();
  Coreset c = batch_subset_coreset(model, x, y, cfg.coreset_size, cfg.seed);
  const auto psi0 = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  BilevelDriver driver(model, std::move(c), psi0, cfg.bilevel);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  TrainTrace trace;
  int iter = 0;
  run_driver_loop(driver, x, y, cfg.bilevel.outer_iters, iter, batch_rng, noise_rng, cfg, eval,
                  trace);
  fire_eval(eval, iter, driver.coreset(), driver.psi(), trace);
  return {driver.coreset(), driver.psi(), std::move(trace)};
}

TrainResult train_bb_sparse_incremental(const Model& model, const Mat& x,
                                        const std::vector<int>& y, const TrainConfig& cfg,
                                        const EvalHook& eval) {
  check_data(x, y);
  cfg.bilevel.validate();
  if (cfg.rounds < 1) throw std::invalid_argument("at least one selection round required");
  if (cfg.psi_fit_steps < 0 || cfg.v_steps < 0) throw std::invalid_argument("negative step count");
  const auto n = static_cast<std::size_t>(x.rows());
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(cfg.bilevel.batch_size), n);
  const int k = cfg.bilevel.mc_samples;
  const int p = model.param_count();

  Coreset c = empty_free_coreset(model, x, cfg.seed);
  auto psi = VariationalGaussian::init(p, cfg.psi_init_std);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  Rng fit_rng = Rng::stream(cfg.seed, "fit");
  std::vector<std::size_t> support;
  TrainTrace trace;
  int iter = 0;

  for (int round = 0; round < cfg.rounds; ++round) {
    psi = fit_variational(psi, cfg.psi_fit_steps, k, AdamConfig{cfg.psi_fit_lr, 0.9, 0.999, 1e-8},
                          fit_rng, coreset_posterior_elbo(model, c))
              .psi;

    // Importance-corrected posterior samples for scoring.
    ad::Tape t;
    const auto psin = register_variational(t, psi);
    Coreset frozen = c;
    frozen.train_u = frozen.train_z = frozen.train_weights = frozen.train_alpha = false;
    const auto nodes = register_coreset(t, frozen);
    const Mat noise = noise_matrix(noise_rng, k, p);
    const auto batch = importance_weights(t, model, psin, noise, frozen, nodes, cfg.bilevel.iw_form);
    const Mat theta = t.value(batch.theta);
    const Mat w_tilde = t.value(batch.w_tilde);

    const auto idx = batch_rng.sample_without_replacement(n, b);
    const Mat xb = take_rows(x, idx);
    const auto yb = take_labels(y, idx);
    const Mat core_ll = loglik_values(model, theta, c.u, c.z);
    const Mat batch_ll = loglik_values(model, theta, xb, yb);
    const auto stats = greedy_stats(core_ll, batch_ll, c.v_raw,
                                    static_cast<double>(n) / static_cast<double>(b), &w_tilde);
    const auto sel = greedy_select(stats, c.v_raw);
    if (!sel.from_coreset) {
      const std::size_t data_idx = idx[static_cast<std::size_t>(sel.index)];
      if (std::find(support.begin(), support.end(), data_idx) == support.end()) {
        support.push_back(data_idx);
        append_point(c, x.row(static_cast<Eigen::Index>(data_idx)), y[data_idx]);
      }
    }

    BilevelDriver driver(model, c, psi, cfg.bilevel);
    run_driver_loop(driver, x, y, cfg.v_steps, iter, batch_rng, noise_rng, cfg, eval, trace);
    c = driver.coreset();
    psi = driver.psi();
  }
  fire_eval(eval, iter, c, psi, trace);
  return {std::move(c), std::move(psi), std::move(trace)};
}

Coreset prune_support(const Coreset& c, int target_size, Rng& rng) {
  if (target_size <= 0) throw std::invalid_argument("target size must be positive");
  const Mat v = c.weights_value();
  if (!(v.sum() > 0.0)) throw std::runtime_error("cannot prune: all coreset weights are zero");
  const std::vector<double> w(v.data(), v.data() + v.size());
  std::vector<char> chosen(static_cast<std::size_t>(c.size()), 0);
  for (int d = 0; d < target_size; ++d) chosen[rng.categorical(w)] = 1;
  std::vector<std::size_t> keep;
  for (std::size_t m = 0; m < chosen.size(); ++m) {
    if (chosen[m]) keep.push_back(m);
  }
  Coreset next = c;
  next.u = take_rows(c.u, keep);
  next.z = take_labels(c.z, keep);
  next.v_raw = Mat::Constant(1, static_cast<Eigen::Index>(keep.size()),
                             c.n_data / static_cast<double>(target_size));
  next.beta = Mat::Zero(1, static_cast<Eigen::Index>(keep.size()));
  if (c.soft_labels) next.z_logits = take_rows(c.z_logits, keep);
  return next;
}

TrainResult prune(const Model& model, const Mat& x, const std::vector<int>& y,
                  const std::vector<int>& sizes, const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  cfg.bilevel.validate();
  if (sizes.empty()) throw std::invalid_argument("empty size schedule");
  if (sizes.front() > x.rows()) throw std::invalid_argument("initial size exceeds dataset");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] <= 0) throw std::invalid_argument("sizes must be positive");
    if (i > 0 && sizes[i] >= sizes[i - 1]) {
      throw std::invalid_argument("sizes must be strictly decreasing");
    }
  }
  if (cfg.steps_per_round < 0) throw std::invalid_argument("negative step count");

  Coreset c = batch_subset_coreset(model, x, y, sizes.front(), cfg.seed);
  const auto psi0 = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  BilevelDriver driver(model, std::move(c), psi0, cfg.bilevel);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  Rng prune_rng = Rng::stream(cfg.seed, "prune");
  TrainTrace trace;
  int iter = 0;
  run_driver_loop(driver, x, y, cfg.steps_per_round, iter, batch_rng, noise_rng, cfg, eval, trace);

  for (std::size_t i = 1; i < sizes.size(); ++i) {
    driver.replace_coreset(prune_support(driver.coreset(), sizes[i], prune_rng));
    driver.reset_psi(psi0);
    driver.reset_optimizers();
    run_driver_loop(driver, x, y, cfg.steps_per_round, iter, batch_rng, noise_rng, cfg, eval,
                    trace);
  }
  fire_eval(eval, iter, driver.coreset(), driver.psi(), trace);
  return {driver.coreset(), driver.psi(), std::move(trace)};
}

TrainResult train_sparse_vi_baseline(const Model& model, const Mat& x, const std::vector<int>& y,
                                     const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  if (cfg.rounds < 1) throw std::invalid_argument("at least one selection round required");
  if (cfg.v_steps < 0 || cfg.map_steps < 0) throw std::invalid_argument("negative step count");
  const auto n = static_cast<std::size_t>(x.rows());
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(cfg.bilevel.batch_size), n);
  const int k = cfg.bilevel.mc_samples;
  const int p = model.param_count();
  const double n_over_b = static_cast<double>(n) / static_cast<double>(b);

  Coreset c = empty_free_coreset(model, x, cfg.seed);
  Rng noise_rng = Rng::stream(cfg.seed, "noise");
  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  std::vector<std::size_t> support;
  TrainTrace trace;
  int iter = 0;
  LaplaceResult lap{VariationalGaussian::init(p, cfg.psi_init_std), 0, 0.0};

  for (int round = 0; round < cfg.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    lap = fit_subset_laplace(model, c.u, c.z, c.v_raw, cfg.map_steps, cfg.map_lr);

    const Mat noise = noise_matrix(noise_rng, k, p);
    const Mat stds = lap.psi.log_stds.array().exp().matrix();
    Mat theta(k, p);
    for (int s = 0; s < k; ++s) theta.row(s) = lap.psi.means + noise.row(s).cwiseProduct(stds);

    const auto idx = batch_rng.sample_without_replacement(n, b);
    const Mat xb = take_rows(x, idx);
    const auto yb = take_labels(y, idx);
    const Mat batch_ll = loglik_values(model, theta, xb, yb);
    {
      const Mat core_ll = loglik_values(model, theta, c.u, c.z);
      const auto stats = greedy_stats(core_ll, batch_ll, c.v_raw, n_over_b, nullptr);
      const auto sel = greedy_select(stats, c.v_raw);
      if (!sel.from_coreset) {
        const std::size_t data_idx = idx[static_cast<std::size_t>(sel.index)];
        if (std::find(support.begin(), support.end(), data_idx) == support.end()) {
          support.push_back(data_idx);
          append_point(c, x.row(static_cast<Eigen::Index>(data_idx)), y[data_idx]);
        }
      }
    }

    // Weight refinement on the fixed sample/minibatch draw; the residual
    // half-norm is the scalar whose gradient the analytic estimate is.
    const Mat core_ll = loglik_values(model, theta, c.u, c.z);
    AdamState adam(AdamConfig{cfg.bilevel.lr_weights, 0.9, 0.999, 1e-8});
    Mat v = c.v_raw;
    for (int step = 0; step < cfg.v_steps; ++step) {
      const auto stats = greedy_stats(core_ll, batch_ll, v, n_over_b, nullptr);
      v = adam.step(v, sparse_vi_weight_gradient(stats)).cwiseMax(0.0);
    }
    c.v_raw = v;
    const auto stats = greedy_stats(core_ll, batch_ll, v, n_over_b, nullptr);
    const double resid = 0.5 * stats.residual.array().square().mean();
    ++iter;
    trace.steps.push_back({iter, resid, -lap.map_objective, 1.0, ms_since(t0)});
    if (cfg.eval_every > 0 && iter % cfg.eval_every == 0) {
      fire_eval(eval, iter, c, lap.psi, trace);
    }
  }
  lap = fit_subset_laplace(model, c.u, c.z, c.v_raw, cfg.map_steps, cfg.map_lr);
  fire_eval(eval, iter, c, lap.psi, trace);
  return {std::move(c), std::move(lap.psi), std::move(trace)};
}

LaplaceResult fit_laplace(const LogJointBuilder& log_joint, int param_count, int map_steps,
                          double map_lr) {
  if (param_count <= 0) throw std::invalid_argument("param_count must be positive");
  if (map_steps < 0 || !(map_lr > 0.0)) throw std::invalid_argument("bad MAP schedule");

  const auto eval_obj = [&](const Mat& th, Mat* grad) {
    ad::Tape t;
    const auto thn = t.variable("theta", th);
    const auto objn = log_joint(t, thn);
    if (t.shape(objn) != std::make_pair<Eigen::Index, Eigen::Index>(1, 1)) {
      throw std::invalid_argument("log-joint must be a 1 x 1 node");
    }
    if (grad != nullptr) {
      const std::vector<ad::NodeId> wrt{thn};
      *grad = t.gradient(objn, wrt)[0];
    }
    return t.value(objn)(0, 0);
  };

  Mat theta = Mat::Zero(1, param_count);
  double lr = map_lr;
  for (int stage = 0; stage < 4; ++stage) {
    AdamState adam(AdamConfig{lr, 0.9, 0.999, 1e-8});
    for (int step = 0; step < map_steps; ++step) {
      Mat grad;
      const double obj = eval_obj(theta, &grad);
      if (!std::isfinite(obj) || !grad.allFinite()) {
        throw std::runtime_error("non-finite log-joint during MAP at step " +
                                 std::to_string(stage * map_steps + step));
      }
      theta = adam.step(theta, -grad);
    }
    lr *= 0.1;
  }

  LaplaceResult out;
  out.map_objective = eval_obj(theta, nullptr);
  Mat log_stds(1, param_count);
  constexpr double kCurvatureFloor = 1e-6;
  for (int j = 0; j < param_count; ++j) {
    const double h = 1e-4 * std::max(1.0, std::abs(theta(0, j)));
    Mat tp = theta;
    Mat tm = theta;
    tp(0, j) += h;
    tm(0, j) -= h;
    Mat gp;
    Mat gm;
    eval_obj(tp, &gp);
    eval_obj(tm, &gm);
    double curvature = -(gp(0, j) - gm(0, j)) / (2.0 * h);  // of the negative log-joint
    if (!(curvature >= kCurvatureFloor)) {
      curvature = kCurvatureFloor;
      ++out.clipped_dims;
    }
    log_stds(0, j) = -0.5 * std::log(curvature);
  }
  out.psi = VariationalGaussian{std::move(theta), std::move(log_stds)};
  return out;
}

LaplaceResult fit_subset_laplace(const Model& model, const Mat& u, const std::vector<int>& z,
                                 const Mat& v, int map_steps, double map_lr) {
  if (u.rows() != static_cast<Eigen::Index>(z.size())) {
    throw std::invalid_argument("subset rows and label count differ");
  }
  if (v.rows() != 1 || v.cols() != u.rows()) throw std::invalid_argument("weights must be 1 x M");
  Coreset c;
  c.u = u;
  c.z = z;
  c.mode = WeightMode::kFreeNonneg;
  c.v_raw = v;
  c.beta = Mat::Zero(1, u.rows());
  c.n_data = v.sum();
  c.train_u = c.train_z = c.train_weights = c.train_alpha = false;
  const auto log_joint = [&model, &c](ad::Tape& t, ad::NodeId theta) {
    const auto nodes = register_coreset(t, c);
    const auto wcll = weighted_coreset_loglik(t, model, theta, c, nodes);
    return t.reduce_sum(t.add(wcll, model.log_prior(t, theta)), ad::Axis::kAll);
  };
  return fit_laplace(log_joint, model.param_count(), map_steps, map_lr);
}

TrainResult train_random_coreset_baseline(const Model& model, const Mat& x,
                                          const std::vector<int>& y, int coreset_size,
                                          const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  if (cfg.psi_fit_steps < 0) throw std::invalid_argument("negative step count");
  Coreset c = init_coreset(InitStrategy::kSubset, x, y, coreset_size, model.spec().classes,
                           cfg.seed);
  c.model_hash = model.spec().hash();
  configure_weight_mode(c, WeightMode::kFixedRatio);
  c.train_u = false;
  c.train_z = false;
  auto psi = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  Rng fit_rng = Rng::stream(cfg.seed, "fit");
  const auto builder = coreset_posterior_elbo(model, c);
  TrainTrace trace;
  int iter = 0;
  double lr = cfg.psi_fit_lr;
  for (int stage = 0; stage < std::max(1, cfg.psi_fit_stages); ++stage) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto fit = fit_variational(psi, cfg.psi_fit_steps, cfg.bilevel.mc_samples,
                                     AdamConfig{lr, 0.9, 0.999, 1e-8}, fit_rng, builder);
    psi = fit.psi;
    append_fit_rows(trace, iter, fit.elbo_trace, ms_since(t0));
    if (cfg.eval_every > 0) fire_eval(eval, iter, c, psi, trace);
    lr *= 0.1;
  }
  fire_eval(eval, iter, c, psi, trace);
  return {std::move(c), std::move(psi), std::move(trace)};
}

TrainResult train_full_mfvi(const Model& model, const Mat& x, const std::vector<int>& y,
                            const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  if (cfg.psi_fit_steps < 0) throw std::invalid_argument("negative step count");
  const int n = static_cast<int>(x.rows());
  const int b = std::min(cfg.bilevel.batch_size, n);
  if (b < 1) throw std::invalid_argument("batch size must be >= 1");

  Coreset none;
  none.u = Mat(0, x.cols());
  none.beta = Mat::Zero(1, 0);
  none.v_raw = Mat::Zero(1, 0);
  none.n_data = static_cast<double>(n);
  none.seed = cfg.seed;
  none.model_hash = model.spec().hash();
  none.train_u = none.train_z = none.train_weights = none.train_alpha = false;

  Rng batch_rng = Rng::stream(cfg.seed, "minibatch");
  const double scale = static_cast<double>(n) / b;
  const ElboBuilder builder = [&model, &x, &y, &batch_rng, n, b,
                               scale](ad::Tape& t, const VariationalNodes& psi, const Mat& noise) {
    const auto idx =
        batch_rng.sample_without_replacement(static_cast<std::size_t>(n), static_cast<std::size_t>(b));
    const auto theta = sample_theta(t, psi, noise);
    const auto datall = data_loglik_sum(t, model, theta, take_rows(x, idx), take_labels(y, idx));
    const auto kl = kl_to_prior(t, psi, model.prior_std_row());
    return obj::elbo_classical_core(t, datall, scale, kl);
  };

  auto psi = VariationalGaussian::init(model.param_count(), cfg.psi_init_std);
  Rng fit_rng = Rng::stream(cfg.seed, "fit");
  TrainTrace trace;
  int iter = 0;
  double lr = cfg.psi_fit_lr;
  for (int stage = 0; stage < std::max(1, cfg.psi_fit_stages); ++stage) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto fit = fit_variational(psi, cfg.psi_fit_steps, cfg.bilevel.mc_samples,
                                     AdamConfig{lr, 0.9, 0.999, 1e-8}, fit_rng, builder);
    psi = fit.psi;
    append_fit_rows(trace, iter, fit.elbo_trace, ms_since(t0));
    if (cfg.eval_every > 0) fire_eval(eval, iter, none, psi, trace);
    lr *= 0.1;
  }
  fire_eval(eval, iter, none, psi, trace);
  return {std::move(none), std::move(psi), std::move(trace)};
}

TrainResult train_subset_laplace_baseline(const Model& model, const Mat& x,
                                          const std::vector<int>& y, int coreset_size,
                                          const TrainConfig& cfg, const EvalHook& eval) {
  check_data(x, y);
  Coreset c = init_coreset(InitStrategy::kSubset, x, y, coreset_size, model.spec().classes,
                           cfg.seed);
  c.model_hash = model.spec().hash();
  configure_weight_mode(c, WeightMode::kFixedRatio);
  c.train_u = false;
  c.train_z = false;

  const auto t0 = std::chrono::steady_clock::now();
  LaplaceResult lap = fit_subset_laplace(model, c.u, c.z, c.weights_value(), cfg.map_steps,
                                         cfg.map_lr);
  TrainTrace trace;
  trace.steps.push_back({1, -lap.map_objective, -lap.map_objective, 1.0, ms_since(t0)});
  int iter = 1;
  fire_eval(eval, iter, c, lap.psi, trace);
  return {std::move(c), std::move(lap.psi), std::move(trace)};
}

}  // namespace corevi
