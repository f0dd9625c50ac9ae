#include "corevi/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace corevi {

namespace {

// Floor inside the root keeps the unrolled second-order sweep finite when a
// coordinate's gradient (and hence its second moment) is exactly zero.
constexpr double kRootFloor = 1e-24;

}  // namespace

ad::Mat AdamState::step(const ad::Mat& params, const ad::Mat& grad) {
  if (params.rows() != grad.rows() || params.cols() != grad.cols())
    throw std::runtime_error("adam: parameter/gradient shape mismatch");
  if (step_ == 0) {
    m_ = ad::Mat::Zero(params.rows(), params.cols());
    v_ = ad::Mat::Zero(params.rows(), params.cols());
  } else if (m_.rows() != params.rows() || m_.cols() != params.cols()) {
    throw std::runtime_error("adam: parameter shape changed mid-run");
  }
  ++step_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 / (1.0 - std::pow(cfg_.beta1, step_));
  const double c2 = 1.0 / (1.0 - std::pow(cfg_.beta2, step_));
  ad::Mat denom = ((v_ * c2).array() + kRootFloor).sqrt().matrix();
  denom.array() += cfg_.eps;
  return params - cfg_.lr * c1 * m_.cwiseQuotient(denom);
}

void AdamState::reset() {
  step_ = 0;
  m_.resize(0, 0);
  v_.resize(0, 0);
}

std::vector<ad::NodeId> diff_adam_step(ad::Tape& t, DiffAdamState& st,
                                       const std::vector<ad::NodeId>& params,
                                       const std::vector<ad::NodeId>& grads) {
  if (params.size() != grads.size())
    throw std::runtime_error("diff adam: parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (ad::NodeId p : params) {
      const auto [r, c] = t.shape(p);
      st.m.push_back(t.constant(ad::Mat::Zero(r, c)));
      st.v.push_back(t.constant(ad::Mat::Zero(r, c)));
    }
  }
  if (st.m.size() != params.size())
    throw std::runtime_error("diff adam: parameter count changed mid-run");
  ++st.step;
  const double c1 = 1.0 / (1.0 - std::pow(st.cfg.beta1, st.step));
  const double c2 = 1.0 / (1.0 - std::pow(st.cfg.beta2, st.step));
  std::vector<ad::NodeId> out(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    st.m[i] = t.add(t.scale(st.m[i], st.cfg.beta1), t.scale(grads[i], 1.0 - st.cfg.beta1));
    st.v[i] = t.add(t.scale(st.v[i], st.cfg.beta2), t.scale(t.square(grads[i]), 1.0 - st.cfg.beta2));
    ad::NodeId denom =
        t.add_scalar(t.sqrt(t.add_scalar(t.scale(st.v[i], c2), kRootFloor)), st.cfg.eps);
    ad::NodeId delta = t.div(t.scale(st.m[i], -st.cfg.lr * c1), denom);
    out[i] = t.add(params[i], delta);
  }
  return out;
}

void BilevelConfig::validate() const {
  if (inner_steps < 0) throw std::runtime_error("bilevel config: inner_steps must be >= 0");
  if (outer_iters < 0) throw std::runtime_error("bilevel config: outer_iters must be >= 0");
  if (batch_size < 1) throw std::runtime_error("bilevel config: batch_size must be >= 1");
  if (mc_samples < 1) throw std::runtime_error("bilevel config: mc_samples must be >= 1");
}

BilevelDriver::BilevelDriver(Model model, Coreset coreset, VariationalGaussian psi,
                             BilevelConfig cfg)
    : model_(std::move(model)),
      coreset_(std::move(coreset)),
      psi_(psi),
      psi_init_(std::move(psi)),
      cfg_(cfg),
      adam_u_({cfg.lr_u, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}),
      adam_z_({cfg.lr_z, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}),
      adam_w_({cfg.lr_weights, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}),
      adam_alpha_({cfg.lr_alpha, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}),
      adam_psi_means_({cfg.lr_psi, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}),
      adam_psi_stds_({cfg.lr_psi, cfg.outer_adam.beta1, cfg.outer_adam.beta2, cfg.outer_adam.eps}) {
  cfg_.validate();
  if (psi_.dim() != model_.param_count())
    throw std::runtime_error("bilevel: psi dimension does not match the model");
}

BilevelDriver::Diag BilevelDriver::step(const ad::Mat& xb, const std::vector<int>& yb, Rng& rng) {
  Diag diag;
  ad::Tape t;
  auto cn = register_coreset(t, coreset_);
  const VariationalGaussian& start = cfg_.warm_start ? psi_ : psi_init_;
  auto pn = register_variational(t, start);
  std::vector<ad::NodeId> psi_params = {pn.means, pn.log_stds};
  const int p = model_.param_count();

  // Outer parameter groups, in a fixed order.
  struct Group {
    ad::NodeId node;
    AdamState* adam;
    char tag;  // 'u', 'z', 'w', 'a', 'p'
  };
  std::vector<Group> groups;
  if (cn.u != ad::kNoNode && coreset_.train_u) groups.push_back({cn.u, &adam_u_, 'u'});
  if (cn.z_logits != ad::kNoNode && coreset_.train_z) groups.push_back({cn.z_logits, &adam_z_, 'z'});
  if (coreset_.train_weights) {
    if (cn.beta != ad::kNoNode) groups.push_back({cn.beta, &adam_w_, 'w'});
    if (cn.v_raw != ad::kNoNode) groups.push_back({cn.v_raw, &adam_w_, 'w'});
  }
  if (cn.alpha != ad::kNoNode && coreset_.train_alpha) groups.push_back({cn.alpha, &adam_alpha_, 'a'});
  if (cfg_.joint_psi) {
    groups.push_back({pn.means, &adam_psi_means_, 'm'});
    groups.push_back({pn.log_stds, &adam_psi_stds_, 's'});
  }
  std::vector<ad::NodeId> wrt;
  for (const auto& g : groups) wrt.push_back(g.node);

  DiffAdamState inner{cfg_.inner_adam};
  std::vector<double> inner_losses;
  auto inner_step = [&](ad::Tape& tp, const std::vector<ad::NodeId>& params, int step_idx) {
    VariationalNodes cur{params[0], params[1]};
    const ad::Mat noise = noise_matrix(rng, cfg_.mc_samples, p);
    ad::NodeId theta = sample_theta(tp, cur, noise);
    ad::NodeId wcll = weighted_coreset_loglik(tp, model_, theta, coreset_, cn);
    ad::NodeId loss = tp.negate(obj::elbo_ip_core(tp, wcll, model_.log_prior(tp, theta),
                                                  log_density(tp, cur, theta)));
    const double lv = tp.value(loss)(0, 0);
    if (!std::isfinite(lv))
      throw std::runtime_error("bilevel: non-finite inner loss at inner step " +
                               std::to_string(step_idx));
    inner_losses.push_back(lv);
    auto gs = tp.backward(loss, params);
    return diff_adam_step(tp, inner, params, gs);
  };

  auto outer_loss_fn = [&](ad::Tape& tp, const std::vector<ad::NodeId>& params) {
    VariationalNodes fin{params[0], params[1]};
    const ad::Mat noise = noise_matrix(rng, cfg_.mc_samples, p);
    WeightedSampleBatch batch =
        importance_weights(tp, model_, fin, noise, coreset_, cn, cfg_.iw_form);
    ad::NodeId dll = data_loglik_sum(tp, model_, batch.theta, xb, yb);
    const double scale = coreset_.n_data / static_cast<double>(xb.rows());
    diag.ess = normalized_ess_value(tp.value(batch.w_tilde));
    return tp.negate(
        elbo_psvi_is_bb(tp, batch, dll, scale, cfg_.force_uniform_weights));
  };

  auto res = ad::unrolled_gradient(t, psi_params, cfg_.inner_steps, inner_step, outer_loss_fn,
                                   std::span<const ad::NodeId>(wrt));

  diag.outer_loss = t.value(res.outer_loss)(0, 0);
  if (!std::isfinite(diag.outer_loss)) throw std::runtime_error("bilevel: non-finite outer loss");
  diag.inner_first = inner_losses.empty() ? 0.0 : inner_losses.front();
  diag.inner_last = inner_losses.empty() ? 0.0 : inner_losses.back();

  // Adopt the refined variational parameters before touching phi.
  psi_.means = t.value(res.final_params[0]);
  psi_.log_stds = t.value(res.final_params[1]);

  for (size_t i = 0; i < groups.size(); ++i) {
    const ad::Mat cur = t.value(groups[i].node);
    const ad::Mat next = groups[i].adam->step(cur, res.grads[i]);
    switch (groups[i].tag) {
      case 'u': coreset_.u = next; break;
      case 'z': coreset_.z_logits = next; break;
      case 'w':
        if (coreset_.mode == WeightMode::kFreeNonneg)
          coreset_.v_raw = next.cwiseMax(0.0);
        else
          coreset_.beta = next;
        break;
      case 'a': coreset_.alpha = next(0, 0); break;
      // Joint mode (meant for inner_steps = 0): the outer Adam moves psi too.
      case 'm': psi_.means = next; break;
      case 's': psi_.log_stds = next; break;
      default: break;
    }
  }

  if (coreset_.size() > 0) diag.weight_sum = coreset_.weights_value().sum();
  return diag;
}

void BilevelDriver::replace_coreset(Coreset c) { coreset_ = std::move(c); }

void BilevelDriver::reset_psi(const VariationalGaussian& psi0) {
  psi_ = psi0;
  psi_init_ = psi0;
}

void BilevelDriver::reset_optimizers() {
  adam_u_.reset();
  adam_z_.reset();
  adam_w_.reset();
  adam_alpha_.reset();
  adam_psi_means_.reset();
  adam_psi_stds_.reset();
}

FitResult fit_variational(const VariationalGaussian& psi0, int steps, int mc_samples,
                          const AdamConfig& adam, Rng& rng, const ElboBuilder& build_elbo) {
  if (steps < 0) throw std::runtime_error("fit_variational: negative step count");
  FitResult out;
  out.psi = psi0;
  AdamState opt_means(adam), opt_stds(adam);
  const int p = psi0.dim();
  for (int s = 0; s < steps; ++s) {
    ad::Tape t;
    auto pn = register_variational(t, out.psi);
    const ad::Mat noise = noise_matrix(rng, mc_samples, p);
    ad::NodeId elbo = build_elbo(t, pn, noise);
    const double ev = t.value(elbo)(0, 0);
    if (!std::isfinite(ev))
      throw std::runtime_error("fit_variational: non-finite bound at step " + std::to_string(s));
    out.elbo_trace.push_back(ev);
    ad::NodeId loss = t.negate(elbo);
    std::vector<ad::NodeId> wrt = {pn.means, pn.log_stds};
    auto grads = t.gradient(loss, std::span<const ad::NodeId>(wrt));
    out.psi.means = opt_means.step(out.psi.means, grads[0]);
    out.psi.log_stds = opt_stds.step(out.psi.log_stds, grads[1]);
  }
  return out;
}

}  // namespace corevi
