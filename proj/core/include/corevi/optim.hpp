#pragma once

#include "corevi/coreset.hpp"
#include "corevi/model.hpp"
#include "corevi/objectives.hpp"
#include "corevi/rng.hpp"
#include "corevi/tape.hpp"
#include "corevi/variational.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace corevi {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction; moments lazily match the parameter
// shape on the first step.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}
  ad::Mat step(const ad::Mat& params, const ad::Mat& grad);
  void reset();
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }
  int steps_taken() const { return step_; }

 private:
  AdamConfig cfg_;
  int step_ = 0;
  ad::Mat m_, v_;
};

// Adam whose moments and updates are tape nodes, so a later reverse sweep
// differentiates through the whole optimization trajectory.
struct DiffAdamState {
  AdamConfig cfg;
  int step = 0;
  std::vector<ad::NodeId> m, v;
};

std::vector<ad::NodeId> diff_adam_step(ad::Tape& t, DiffAdamState& st,
                                       const std::vector<ad::NodeId>& params,
                                       const std::vector<ad::NodeId>& grads);

struct BilevelConfig {
  int inner_steps = 50;  // T
  AdamConfig inner_adam{0.01, 0.9, 0.999, 1e-8};
  double lr_u = 1e-2;
  double lr_z = 1e-2;
  double lr_weights = 1e-2;
  double lr_alpha = 1e-2;
  double lr_psi = 1e-2;  // joint mode only; psi normally trains in the inner problem
  int outer_iters = 500;
  int batch_size = 30;  // B
  int mc_samples = 10;  // K
  bool warm_start = true;
  bool joint_psi = false;  // ablation: psi follows the outer objective directly
  bool force_uniform_weights = false;
  IwForm iw_form = IwForm::kJointRatio;
  AdamConfig outer_adam{0.01, 0.9, 0.999, 1e-8};
  void validate() const;
};

// One outer iteration of the nested scheme: T differentiable Adam steps on
// the coreset-evidence loss refine psi, the corrected data bound is read at
// the unrolled endpoint, and one reverse sweep yields coreset-parameter
// gradients through the whole trajectory.
class BilevelDriver {
 public:
  struct Diag {
    double inner_first = 0.0;  // inner loss before the first inner update
    double inner_last = 0.0;   // inner loss at the last inner step
    double outer_loss = 0.0;
    double ess = 0.0;
    double weight_sum = 0.0;
  };

  BilevelDriver(Model model, Coreset coreset, VariationalGaussian psi, BilevelConfig cfg);

  Diag step(const ad::Mat& xb, const std::vector<int>& yb, Rng& rng);

  const Coreset& coreset() const { return coreset_; }
  const VariationalGaussian& psi() const { return psi_; }
  const BilevelConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }

  // Pruning rounds replace the coreset and restart optimization.
  void replace_coreset(Coreset c);
  void reset_psi(const VariationalGaussian& psi0);
  void reset_optimizers();

 private:
  Model model_;
  Coreset coreset_;
  VariationalGaussian psi_, psi_init_;
  BilevelConfig cfg_;
  AdamState adam_u_, adam_z_, adam_w_, adam_alpha_, adam_psi_means_, adam_psi_stds_;
};

// Plain single-level reparameterized fit of psi: each step draws fresh
// noise, builds the bound, and ascends it with Adam.
using ElboBuilder =
    std::function<ad::NodeId(ad::Tape& t, const VariationalNodes& psi, const ad::Mat& noise)>;

struct FitResult {
  VariationalGaussian psi;
  std::vector<double> elbo_trace;
};

FitResult fit_variational(const VariationalGaussian& psi0, int steps, int mc_samples,
                          const AdamConfig& adam, Rng& rng, const ElboBuilder& build_elbo);

}  // namespace corevi
