#include "corevi/algorithms.hpp"
#include "corevi/data.hpp"
#include "corevi/objectives.hpp"
#include "corevi/optim.hpp"
#include "corevi/predict.hpp"

#include <benchmark/benchmark.h>

namespace {

using corevi::ad::Mat;

struct Problem {
  corevi::Model model;
  corevi::Coreset coreset;
  corevi::VariationalGaussian psi;
  Mat x;
  std::vector<int> y;
};

Problem make_problem(int dim, int coreset_size, int n) {
  const corevi::Dataset data = corevi::gen_synthetic_logreg(n, dim, 11);
  corevi::Model model(corevi::ModelSpec::logistic(dim));
  Problem p{model,
            corevi::init_coreset(corevi::InitStrategy::kSubset, data.X, data.y, coreset_size, 2,
                                 11),
            corevi::VariationalGaussian::init(model.param_count(), 1.0), data.X, data.y};
  p.coreset.model_hash = p.model.spec().hash();
  return p;
}

// Builds the importance-weighted outer bound and one reverse sweep through
// it; this is the per-iteration core of every trainer.
void outer_bound_gradient(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  const int k = 10;
  Problem p = make_problem(dim, 20, 64);
  corevi::Rng rng = corevi::Rng::stream(5, "noise");

  for (auto _ : state) {
    corevi::ad::Tape t;
    const auto psi_nodes = corevi::register_variational(t, p.psi);
    const auto c_nodes = corevi::register_coreset(t, p.coreset);
    const Mat noise = corevi::noise_matrix(rng, k, p.model.param_count());
    const auto batch = corevi::importance_weights(t, p.model, psi_nodes, noise, p.coreset,
                                                  c_nodes);
    const auto data_ll = corevi::data_loglik_sum(t, p.model, batch.theta, p.x, p.y);
    const auto loss = t.negate(corevi::elbo_psvi_is_bb(t, batch, data_ll,
                                                       static_cast<double>(p.x.rows()) / 30.0));
    const std::vector<corevi::ad::NodeId> wrt = {psi_nodes.means, psi_nodes.log_stds, c_nodes.u,
                                                 c_nodes.beta};
    const auto grads = t.gradient(loss, wrt);
    benchmark::DoNotOptimize(grads[0](0, 0));
  }
  state.SetItemsProcessed(state.iterations());
}

// Forward-only replay of an existing graph with fresh bindings, the cheap
// path minibatch evaluation relies on.
void tape_replay(benchmark::State& state) {
  const int dim = static_cast<int>(state.range(0));
  Problem p = make_problem(dim, 20, 64);
  corevi::Rng rng = corevi::Rng::stream(5, "noise");

  corevi::ad::Tape t;
  const auto psi_nodes = corevi::register_variational(t, p.psi);
  const auto c_nodes = corevi::register_coreset(t, p.coreset);
  const Mat noise = corevi::noise_matrix(rng, 10, p.model.param_count());
  const auto batch =
      corevi::importance_weights(t, p.model, psi_nodes, noise, p.coreset, c_nodes);
  const auto loss = t.negate(corevi::elbo_ip(t, batch));
  benchmark::DoNotOptimize(t.value(loss));

  std::map<std::string, Mat> bindings;
  for (const auto& [name, id] : t.variables()) bindings[name] = t.value(id);

  for (auto _ : state) {
    bindings["psi.means"].array() += 1e-6;
    t.evaluate(bindings);
    benchmark::DoNotOptimize(t.value(loss)(0, 0));
  }
  state.SetItemsProcessed(state.iterations());
}

// One full outer iteration: T unrolled differentiable Adam steps on the
// inner bound, then the hypergradient sweep.
void bilevel_step(benchmark::State& state) {
  const int inner_steps = static_cast<int>(state.range(0));
  Problem p = make_problem(2, 8, 64);
  p.coreset.mode = corevi::WeightMode::kSoftmax;
  p.coreset.train_weights = true;

  corevi::BilevelConfig cfg;
  cfg.inner_steps = inner_steps;
  cfg.batch_size = 30;
  cfg.mc_samples = 10;
  cfg.outer_iters = 1;
  corevi::BilevelDriver driver(p.model, p.coreset, p.psi, cfg);
  corevi::Rng noise_rng = corevi::Rng::stream(5, "noise");
  corevi::Rng batch_rng = corevi::Rng::stream(5, "minibatch");

  for (auto _ : state) {
    const auto idx = batch_rng.sample_without_replacement(static_cast<size_t>(p.x.rows()), 30);
    Mat xb(30, p.x.cols());
    std::vector<int> yb(30);
    for (int i = 0; i < 30; ++i) {
      xb.row(i) = p.x.row(static_cast<Eigen::Index>(idx[static_cast<size_t>(i)]));
      yb[static_cast<size_t>(i)] = p.y[idx[static_cast<size_t>(i)]];
    }
    const auto diag = driver.step(xb, yb, noise_rng);
    benchmark::DoNotOptimize(diag.outer_loss);
  }
  state.SetItemsProcessed(state.iterations());
}

// Importance-weighted predictive over a block of query points.
void predictive_batch(benchmark::State& state) {
  const int points = static_cast<int>(state.range(0));
  Problem p = make_problem(2, 16, 128);
  corevi::Rng rng = corevi::Rng::stream(7, "eval");
  const Mat noise = corevi::noise_matrix(rng, 10, p.model.param_count());
  const Mat queries = p.x.topRows(points);

  for (auto _ : state) {
    const Mat probs = corevi::posterior_predictive(p.model, p.psi, p.coreset, queries, noise);
    benchmark::DoNotOptimize(probs(0, 0));
  }
  state.SetItemsProcessed(state.iterations() * points);
}

}  // namespace

BENCHMARK(outer_bound_gradient)->Arg(2)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);
BENCHMARK(tape_replay)->Arg(2)->Arg(10)->Arg(50)->Unit(benchmark::kMicrosecond);
BENCHMARK(bilevel_step)->Arg(10)->Arg(50)->Unit(benchmark::kMillisecond);
BENCHMARK(predictive_batch)->Arg(16)->Arg(256)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
