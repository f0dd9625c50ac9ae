#include "corevi/optim.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "support.hpp"

using corevi::AdamConfig;
using corevi::AdamState;
using corevi::BilevelConfig;
using corevi::BilevelDriver;
using corevi::Coreset;
using corevi::DiffAdamState;
using corevi::Model;
using corevi::ModelSpec;
using corevi::Rng;
using corevi::VariationalGaussian;
using corevi::WeightMode;
using corevi::ad::Mat;
using corevi::ad::NodeId;
using corevi::ad::Tape;

TEST_CASE("adam with zero gradient leaves parameters untouched") {
  AdamState opt({0.1, 0.9, 0.999, 1e-8});
  Mat p = Mat::Constant(1, 3, 2.5);
  for (int s = 0; s < 5; ++s) p = opt.step(p, Mat::Zero(1, 3));
  CHECK(p == Mat::Constant(1, 3, 2.5));
}

TEST_CASE("first adam step never exceeds the learning rate") {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    AdamState opt({0.05, 0.9, 0.999, 1e-8});
    const Mat p = testsup::random_mat(rng, 2, 3, 1.0);
    const Mat g = testsup::random_mat(rng, 2, 3, 10.0);
    const Mat next = opt.step(p, g);
    CHECK((next - p).cwiseAbs().maxCoeff() <= 0.05 * (1.0 + 1e-9));
  }
}

TEST_CASE("two adam steps against a unit gradient walk two learning rates") {
  AdamState opt({0.1, 0.9, 0.999, 1e-8});
  Mat p = Mat::Zero(1, 1);
  p = opt.step(p, Mat::Ones(1, 1));
  p = opt.step(p, Mat::Ones(1, 1));
  CHECK(p(0, 0) == doctest::Approx(-0.2).epsilon(1e-6));
}

TEST_CASE("the tape-emitted adam reproduces the numeric one step for step") {
  Rng rng(11);
  const int steps = 10;
  std::vector<Mat> grads;
  for (int s = 0; s < steps; ++s) grads.push_back(testsup::random_mat(rng, 1, 4, 2.0));

  AdamConfig cfg{0.07, 0.9, 0.999, 1e-8};
  AdamState numeric(cfg);
  Mat p_num = Mat::Constant(1, 4, 0.5);
  Tape t;
  DiffAdamState diff{cfg};
  std::vector<NodeId> p_node = {t.variable("p", Mat::Constant(1, 4, 0.5))};
  for (int s = 0; s < steps; ++s) {
    p_num = numeric.step(p_num, grads[s]);
    p_node = corevi::diff_adam_step(t, diff, p_node, {t.constant(grads[s])});
    CHECK((t.value(p_node[0]) - p_num).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("unrolled hypergradient through adam matches a numeric replay") {
  // Inner: 3 adam steps on  a/2 (psi - c phi)^2;  outer: (psi_3 - d)^2.
  const double a = 1.4, c = 0.8, d = -0.3, phi0 = 0.9, psi0 = 0.2;
  const AdamConfig cfg{0.3, 0.9, 0.999, 1e-8};
  const int steps = 3;

  auto outer_at = [&](double phi) {
    AdamState opt(cfg);
    Mat psi = Mat::Constant(1, 1, psi0);
    for (int s = 0; s < steps; ++s) {
      Mat g = Mat::Constant(1, 1, a * (psi(0, 0) - c * phi));
      psi = opt.step(psi, g);
    }
    const double r = psi(0, 0) - d;
    return r * r;
  };

  Tape t;
  NodeId phi = t.variable("phi", Mat::Constant(1, 1, phi0));
  NodeId psi_var = t.variable("psi0", Mat::Constant(1, 1, psi0));
  DiffAdamState diff{cfg};
  auto inner = [&](Tape& tp, const std::vector<NodeId>& params, int) {
    NodeId resid = tp.sub(params[0], tp.scale(phi, c));
    NodeId loss = tp.scale(tp.square(resid), 0.5 * a);
    auto gs = tp.backward(loss, params);
    return corevi::diff_adam_step(tp, diff, params, gs);
  };
  auto outer = [&](Tape& tp, const std::vector<NodeId>& params) {
    return tp.square(tp.add_scalar(params[0], -d));
  };
  std::vector<NodeId> wrt = {phi};
  auto res = corevi::ad::unrolled_gradient(t, {psi_var}, steps, inner, outer,
                                           std::span<const NodeId>(wrt));
  CHECK(t.value(res.outer_loss)(0, 0) == doctest::Approx(outer_at(phi0)).epsilon(1e-12));

  const double h = 1e-6;
  const double fd = (outer_at(phi0 + h) - outer_at(phi0 - h)) / (2.0 * h);
  CHECK(res.grads[0](0, 0) == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("zero inner learning rate makes the hypergradient the direct gradient") {
  const double a = 2.0, c = 0.5, d = 0.1;
  auto run = [&](int steps, double lr) {
    Tape t;
    NodeId phi = t.variable("phi", Mat::Constant(1, 1, 0.7));
    NodeId psi_var = t.variable("psi0", Mat::Constant(1, 1, -0.4));
    DiffAdamState diff{AdamConfig{lr, 0.9, 0.999, 1e-8}};
    auto inner = [&](Tape& tp, const std::vector<NodeId>& params, int) {
      NodeId loss = tp.scale(tp.square(tp.sub(params[0], tp.scale(phi, c))), 0.5 * a);
      auto gs = tp.backward(loss, params);
      return corevi::diff_adam_step(tp, diff, params, gs);
    };
    auto outer = [&](Tape& tp, const std::vector<NodeId>& params) {
      return tp.square(tp.sub(tp.mul(params[0], phi), tp.constant(Mat::Constant(1, 1, d))));
    };
    std::vector<NodeId> wrt = {phi};
    auto res = corevi::ad::unrolled_gradient(t, {psi_var}, steps, inner, outer,
                                             std::span<const NodeId>(wrt));
    return res.grads[0](0, 0);
  };
  CHECK(run(5, 0.0) == run(0, 0.25));
}

namespace {

struct ToyProblem {
  Model model{ModelSpec::logistic(2, 1.0)};
  Mat x;
  std::vector<int> y;
  Coreset coreset;
  VariationalGaussian psi{VariationalGaussian::init(3, 1.0)};

  explicit ToyProblem(int n = 24, int m = 3) {
    Rng rng(123);
    x = testsup::random_mat(rng, n, 2, 1.0);
    y.resize(n);
    for (int i = 0; i < n; ++i) y[i] = x(i, 0) + 0.5 * x(i, 1) > 0 ? 1 : 0;
    coreset = corevi::init_coreset(corevi::InitStrategy::kSubset, x, y, m, 2, 7);
    coreset.mode = WeightMode::kSoftmax;
  }
};

BilevelConfig small_config() {
  BilevelConfig cfg;
  cfg.inner_steps = 4;
  cfg.inner_adam.lr = 0.05;
  cfg.lr_u = 0.05;
  cfg.lr_weights = 0.05;
  cfg.lr_alpha = 0.05;
  cfg.mc_samples = 4;
  cfg.batch_size = 24;
  return cfg;
}

}  // namespace

TEST_CASE("bilevel steps replay bitwise under the same seed") {
  ToyProblem toy;
  auto run = [&]() {
    BilevelDriver drv(toy.model, toy.coreset, toy.psi, small_config());
    Rng rng = Rng::stream(99, "noise");
    for (int s = 0; s < 3; ++s) drv.step(toy.x, toy.y, rng);
    return std::make_pair(drv.coreset(), drv.psi());
  };
  auto [c1, p1] = run();
  auto [c2, p2] = run();
  CHECK(c1.u == c2.u);
  CHECK(c1.beta == c2.beta);
  CHECK(p1.means == p2.means);
  CHECK(p1.log_stds == p2.log_stds);
}

TEST_CASE("with phi frozen the inner problem still descends") {
  ToyProblem toy;
  toy.coreset.train_u = false;
  toy.coreset.train_weights = false;
  toy.coreset.train_alpha = false;
  BilevelConfig cfg = small_config();
  cfg.inner_steps = 12;
  cfg.inner_adam.lr = 0.08;
  BilevelDriver drv(toy.model, toy.coreset, toy.psi, cfg);
  Rng rng = Rng::stream(5, "noise");
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 6; ++s) {
    auto d = drv.step(toy.x, toy.y, rng);
    if (s == 0) first = d.inner_first;
    last = d.inner_last;
  }
  CHECK(last < first);
}

TEST_CASE("outer objective improves on a small dense problem") {
  ToyProblem toy;
  BilevelConfig cfg = small_config();
  cfg.inner_steps = 6;
  BilevelDriver drv(toy.model, toy.coreset, toy.psi, cfg);
  Rng rng = Rng::stream(17, "noise");
  std::vector<double> losses;
  for (int s = 0; s < 40; ++s) losses.push_back(drv.step(toy.x, toy.y, rng).outer_loss);
  const double head = (losses[0] + losses[1] + losses[2]) / 3.0;
  const double tail = (losses[37] + losses[38] + losses[39]) / 3.0;
  CHECK(tail < head);
}

TEST_CASE("free-weight mode keeps weights non-negative through updates") {
  ToyProblem toy;
  toy.coreset.mode = WeightMode::kFreeNonneg;
  toy.coreset.v_raw = Mat::Constant(1, 3, 0.01);
  BilevelConfig cfg = small_config();
  cfg.lr_weights = 0.5;  // large enough to drive weights at the boundary
  BilevelDriver drv(toy.model, toy.coreset, toy.psi, cfg);
  Rng rng = Rng::stream(23, "noise");
  for (int s = 0; s < 10; ++s) {
    drv.step(toy.x, toy.y, rng);
    CHECK(drv.coreset().v_raw.minCoeff() >= 0.0);
  }
}

TEST_CASE("single-level fit recovers the conjugate weighted posterior") {
  // z_i ~ N(theta, 1), theta ~ N(0, 4); coreset z = {0.5, -0.3}, v = 2.5.
  const double sigma = 1.0, tau0 = 2.0;
  const std::vector<double> cz = {0.5, -0.3};
  const std::vector<double> cv = {2.5, 2.5};
  const double prec = 1.0 / (tau0 * tau0) + (cv[0] + cv[1]) / (sigma * sigma);
  const double pmean = (cv[0] * cz[0] + cv[1] * cz[1]) / (sigma * sigma) / prec;
  const double pstd = std::sqrt(1.0 / prec);

  auto build = [&](Tape& t, const corevi::VariationalNodes& pn, const Mat& noise) {
    NodeId theta = corevi::sample_theta(t, pn, noise);
    NodeId wcll = t.constant(Mat::Zero(noise.rows(), 1));
    for (size_t i = 0; i < cz.size(); ++i) {
      NodeId diff = t.sub(t.constant(Mat::Constant(1, 1, cz[i])), theta);
      NodeId ll = t.add_scalar(t.scale(t.square(t.scale(diff, 1.0 / sigma)), -0.5),
                               -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma));
      wcll = t.add(wcll, t.scale(ll, cv[i]));
    }
    NodeId dp = theta;
    NodeId log_prior = t.add_scalar(t.scale(t.square(t.scale(dp, 1.0 / tau0)), -0.5),
                                    -0.5 * std::log(2.0 * std::numbers::pi * tau0 * tau0));
    return corevi::obj::elbo_ip_core(t, wcll, log_prior, corevi::log_density(t, pn, theta));
  };

  Rng rng = Rng::stream(71, "noise");
  // Adam hovers about one learning rate from the optimum under gradient
  // noise, so anneal in stages.
  VariationalGaussian psi = VariationalGaussian::init(1, 1.0);
  std::vector<double> first_trace;
  for (double lr : {0.05, 0.005, 5e-4}) {
    auto fit = corevi::fit_variational(psi, 300, 20, AdamConfig{lr, 0.9, 0.999, 1e-8}, rng, build);
    psi = fit.psi;
    if (first_trace.empty()) first_trace = fit.elbo_trace;
  }
  CHECK(psi.means(0, 0) == doctest::Approx(pmean).epsilon(1e-3));
  CHECK(std::exp(psi.log_stds(0, 0)) == doctest::Approx(pstd).epsilon(2e-2));
  CHECK(first_trace.back() > first_trace.front());
}

TEST_CASE("config validation rejects nonsense") {
  BilevelConfig cfg;
  cfg.inner_steps = -1;
  CHECK_THROWS(cfg.validate());
  cfg.inner_steps = 5;
  cfg.mc_samples = 0;
  CHECK_THROWS(cfg.validate());
}
