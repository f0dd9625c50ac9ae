#pragma once

#include "corevi/coreset.hpp"
#include "corevi/model.hpp"
#include "corevi/optim.hpp"
#include "corevi/rng.hpp"
#include "corevi/variational.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace corevi {

struct TraceRow {
  int iter = 0;
  double outer_loss = 0.0;
  double inner_last = 0.0;
  double ess = 0.0;
  double wall_ms = 0.0;
};

struct EvalRow {
  int iter = 0;
  double accuracy = 0.0;
  double nll = 0.0;
  int coreset_size = 0;
};

struct TrainTrace {
  std::vector<TraceRow> steps;
  std::vector<EvalRow> evals;
};

struct TrainResult {
  Coreset coreset;
  VariationalGaussian psi;
  TrainTrace trace;
};

// Periodic test-set evaluation; the hook appends one EvalRow carrying the
// given iteration index. Fired every eval_every outer iterations and once
// at the end of training.
using EvalHook =
    std::function<void(int iter, const Coreset& c, const VariationalGaussian& psi, TrainTrace&)>;

struct TrainConfig {
  BilevelConfig bilevel;
  InitStrategy init = InitStrategy::kSubset;
  WeightMode mode = WeightMode::kSoftmax;
  bool soft_labels = false;
  double soft_init_logit = 2.0;  // initial logit of the observed class
  int coreset_size = 20;
  std::uint64_t seed = 0;
  double psi_init_std = 1.0;
  int eval_every = 0;  // 0 disables periodic evaluation

  // Incremental selection and the non-unrolled baseline.
  int rounds = 20;          // selection rounds
  int psi_fit_steps = 200;  // per-round single-level fit
  double psi_fit_lr = 0.01;
  int psi_fit_stages = 2;  // baseline fits anneal the step size by 10x per stage
  int v_steps = 30;        // weight refinement steps per round

  // Laplace baseline.
  int map_steps = 400;
  double map_lr = 0.05;

  // Pruning.
  int steps_per_round = 200;
};

// K x M value matrix of log p(y_m | x_m, theta_k) for fixed samples.
ad::Mat loglik_values(const Model& model, const ad::Mat& theta_samples, const ad::Mat& x,
                      const std::vector<int>& y);

// Removes the per-column mean: uniform over samples, or w_tilde-weighted
// when the samples came from an importance-corrected proposal.
ad::Mat centered_loglik(const ad::Mat& ll, const ad::Mat* w_tilde = nullptr);

// Moment estimates behind the greedy criterion; g covers the coreset
// columns, gp the minibatch columns, and residual r_s = (N/B) 1'gp_s - v'g_s.
struct GreedyStats {
  ad::Mat g;           // K x M centered
  ad::Mat gp;          // K x B centered
  ad::Mat residual;    // K x 1
  ad::Mat corr_core;   // 1 x M
  ad::Mat corr_batch;  // 1 x B
};

GreedyStats greedy_stats(const ad::Mat& core_ll, const ad::Mat& batch_ll, const ad::Mat& v,
                         double n_over_b, const ad::Mat* w_tilde = nullptr);

struct Selection {
  bool from_coreset = false;
  int index = -1;
  double score = 0.0;
};

// Highest |corr| over weighted coreset points, signed corr over everything
// else; ties go to the lowest index with coreset points first.
Selection greedy_select(const GreedyStats& stats, const ad::Mat& v);

// Projected-step gradient of the weight objective: -(1/S) sum_s g_s r_s.
ad::Mat sparse_vi_weight_gradient(const GreedyStats& stats);

// Trains locations, weights, and (optionally) labels through the nested
// corrected bound.
TrainResult train_bb_psvi(const Model& model, const ad::Mat& x, const std::vector<int>& y,
                          const TrainConfig& cfg, const EvalHook& eval = {});

// Same nested training but starting from a caller-built coreset (train
// flags, weight mode, and n_data taken as given); psi starts fresh.
TrainResult train_bb_psvi_from(const Model& model, const ad::Mat& x, const std::vector<int>& y,
                               Coreset initial, const TrainConfig& cfg, const EvalHook& eval = {});

// Frozen data subset, free non-negative weights refined through the nested
// bound.
TrainResult train_bb_sparse_batch(const Model& model, const ad::Mat& x, const std::vector<int>& y,
                                  const TrainConfig& cfg, const EvalHook& eval = {});

// Grows the support one greedy pick per round from an empty coreset.
TrainResult train_bb_sparse_incremental(const Model& model, const ad::Mat& x,
                                        const std::vector<int>& y, const TrainConfig& cfg,
                                        const EvalHook& eval = {});

// One compression round: target_size multinomial draws proportional to the
// materialized weights, duplicates collapsed, so the realized support is at
// most target_size; weights reset to (N / target_size) on the survivors.
Coreset prune_support(const Coreset& c, int target_size, Rng& rng);

// Multinomial compression through a decreasing size schedule.
TrainResult prune(const Model& model, const ad::Mat& x, const std::vector<int>& y,
                  const std::vector<int>& sizes, const TrainConfig& cfg, const EvalHook& eval = {});

// Non-unrolled incremental baseline: Laplace posterior samples and the
// analytic weight-gradient estimate.
TrainResult train_sparse_vi_baseline(const Model& model, const ad::Mat& x,
                                     const std::vector<int>& y, const TrainConfig& cfg,
                                     const EvalHook& eval = {});

struct LaplaceResult {
  VariationalGaussian psi;
  int clipped_dims = 0;
  double map_objective = 0.0;
};

// Builds a 1 x 1 log-joint node from a 1 x P parameter row.
using LogJointBuilder = std::function<ad::NodeId(ad::Tape&, ad::NodeId theta)>;

// MAP by Adam (step size annealed through four decades, map_steps each),
// then a diagonal-curvature Gaussian from central differences of the
// gradient; non-positive curvature is floored and counted.
LaplaceResult fit_laplace(const LogJointBuilder& log_joint, int param_count, int map_steps,
                          double map_lr);

// Laplace fit of the weighted subset posterior; an empty subset yields the
// prior itself.
LaplaceResult fit_subset_laplace(const Model& model, const ad::Mat& u, const std::vector<int>& z,
                                 const ad::Mat& v, int map_steps, double map_lr);

// Fixed stratified subset with fixed (N/M) multiplicities, plain
// mean-field fit. M = N gives full-data mean-field VI.
TrainResult train_random_coreset_baseline(const Model& model, const ad::Mat& x,
                                          const std::vector<int>& y, int coreset_size,
                                          const TrainConfig& cfg, const EvalHook& eval = {});

// Unconstrained mean-field fit on the full dataset: minibatched classical
// bound, step size annealed 10x per stage. Returns an empty coreset so the
// result evaluates as plain Monte Carlo from psi.
TrainResult train_full_mfvi(const Model& model, const ad::Mat& x, const std::vector<int>& y,
                            const TrainConfig& cfg, const EvalHook& eval = {});

// Laplace posterior on a fixed uniformly-weighted random data subset.
TrainResult train_subset_laplace_baseline(const Model& model, const ad::Mat& x,
                                          const std::vector<int>& y, int coreset_size,
                                          const TrainConfig& cfg, const EvalHook& eval = {});

}  // namespace corevi
