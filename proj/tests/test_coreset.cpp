#include "corevi/coreset.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "support.hpp"

using corevi::Coreset;
using corevi::CoresetNodes;
using corevi::InitStrategy;
using corevi::Model;
using corevi::ModelSpec;
using corevi::Rng;
using corevi::WeightMode;
using corevi::ad::Mat;
using corevi::ad::Tape;

namespace {

Coreset basic_coreset(WeightMode mode, int m, int d, double n) {
  Coreset c;
  c.mode = mode;
  c.n_data = n;
  c.u = Mat::Zero(m, d);
  c.z.assign(m, 0);
  c.beta = Mat::Zero(1, m);
  c.v_raw = Mat::Constant(1, m, n / m);
  return c;
}

}  // namespace

TEST_CASE("weight materialization matches the mode formulas") {
  SUBCASE("fixed ratio spreads N evenly") {
    Coreset c = basic_coreset(WeightMode::kFixedRatio, 20, 2, 800.0);
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    const Mat v = t.value(nodes.weights);
    REQUIRE(v.cols() == 20);
    for (int i = 0; i < 20; ++i) CHECK(v(0, i) == doctest::Approx(40.0).epsilon(1e-14));
    CHECK(c.weights_value().isApprox(v, 1e-14));
  }
  SUBCASE("uniform softmax logits give N/M") {
    Coreset c = basic_coreset(WeightMode::kSoftmax, 4, 2, 100.0);
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    const Mat v = t.value(nodes.weights);
    for (int i = 0; i < 4; ++i) CHECK(v(0, i) == doctest::Approx(25.0).epsilon(1e-14));
  }
  SUBCASE("alpha-scaled softmax with one boosted logit") {
    Coreset c = basic_coreset(WeightMode::kSoftmaxAlpha, 4, 2, 6.0);
    c.beta(0, 0) = std::log(3.0);
    c.alpha = 1.0;
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    const Mat v = t.value(nodes.weights);
    CHECK(v(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
    for (int i = 1; i < 4; ++i) CHECK(v(0, i) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("unit mode is all ones") {
    Coreset c = basic_coreset(WeightMode::kUnit, 3, 2, 50.0);
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    CHECK(t.value(nodes.weights).isApprox(Mat::Ones(1, 3), 1e-15));
  }
  SUBCASE("free mode passes v through") {
    Coreset c = basic_coreset(WeightMode::kFreeNonneg, 3, 2, 50.0);
    c.v_raw << 1.5, 0.0, 7.25;
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    CHECK(t.value(nodes.weights) == c.v_raw);
  }
}

TEST_CASE("softmax weights sum to N for any logits and any M") {
  Rng rng(91);
  for (int m : {1, 3, 17, 64}) {
    Coreset c = basic_coreset(WeightMode::kSoftmax, m, 2, 1234.5);
    c.beta = testsup::random_mat(rng, 1, m, 4.0);
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    const Mat v = t.value(nodes.weights);
    CHECK(v.minCoeff() >= 0.0);
    CHECK(std::abs(v.sum() - 1234.5) < 1e-9);
  }
  Coreset c = basic_coreset(WeightMode::kSoftmaxAlpha, 9, 2, 100.0);
  Rng rng2(92);
  c.beta = testsup::random_mat(rng2, 1, 9, 3.0);
  c.alpha = 2.5;
  Tape t;
  auto nodes = corevi::register_coreset(t, c);
  CHECK(std::abs(t.value(nodes.weights).sum() - 2.5 * 100.0) < 1e-9);
}

TEST_CASE("softmax materialization preserves the ordering of the logits") {
  Rng rng(17);
  Coreset c = basic_coreset(WeightMode::kSoftmax, 12, 2, 60.0);
  c.beta = testsup::random_mat(rng, 1, 12, 2.0);
  Tape t;
  auto nodes = corevi::register_coreset(t, c);
  const Mat v = t.value(nodes.weights);
  std::vector<int> by_beta(12), by_v(12);
  for (int i = 0; i < 12; ++i) by_beta[i] = by_v[i] = i;
  std::sort(by_beta.begin(), by_beta.end(),
            [&](int a, int b) { return c.beta(0, a) < c.beta(0, b); });
  std::sort(by_v.begin(), by_v.end(), [&](int a, int b) { return v(0, a) < v(0, b); });
  CHECK(by_beta == by_v);
}

TEST_CASE("weighted coreset log-likelihood is the v-weighted sum of point terms") {
  Model model(ModelSpec::logistic(2, 1.0));
  SUBCASE("empty coreset contributes exact zero") {
    Coreset c;
    c.u = Mat(0, 2);
    c.n_data = 10.0;
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    CHECK(nodes.empty);
    auto theta = t.variable("theta", Mat::Zero(3, 3));
    auto wll = corevi::weighted_coreset_loglik(t, model, theta, c, nodes);
    CHECK(t.value(wll) == Mat::Zero(3, 1));
  }
  SUBCASE("all-zero weights also give zero") {
    Coreset c = basic_coreset(WeightMode::kFreeNonneg, 2, 2, 10.0);
    c.v_raw.setZero();
    c.u << 0.3, -0.7, 1.1, 0.4;
    c.z = {0, 1};
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    auto theta = t.variable("theta", Mat::Zero(3, 3));
    auto wll = corevi::weighted_coreset_loglik(t, model, theta, c, nodes);
    CHECK(t.value(wll).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("single point with weight two at theta = 0") {
    Coreset c = basic_coreset(WeightMode::kFreeNonneg, 1, 2, 2.0);
    c.v_raw(0, 0) = 2.0;
    c.u << 0.4, -1.2;
    c.z = {1};
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    auto theta = t.variable("theta", Mat::Zero(1, 3));
    auto wll = corevi::weighted_coreset_loglik(t, model, theta, c, nodes);
    CHECK(t.value(wll)(0, 0) == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));
  }
  SUBCASE("general case matches a hand-computed weighted sum") {
    Coreset c = basic_coreset(WeightMode::kFreeNonneg, 2, 2, 4.0);
    c.v_raw << 1.0, 3.0;
    c.u << 0.5, -0.3, -1.0, 0.8;
    c.z = {1, 0};
    Rng rng(5);
    const Mat theta_v = testsup::random_mat(rng, 1, 3, 0.7);
    Tape t;
    auto nodes = corevi::register_coreset(t, c);
    auto theta = t.variable("theta", theta_v);
    auto wll = corevi::weighted_coreset_loglik(t, model, theta, c, nodes);
    const double l0 = model.log_likelihood_point(theta_v, c.u.row(0), 1);
    const double l1 = model.log_likelihood_point(theta_v, c.u.row(1), 0);
    CHECK(t.value(wll)(0, 0) == doctest::Approx(1.0 * l0 + 3.0 * l1).epsilon(1e-12));
  }
}

TEST_CASE("subset initialization stratifies by class") {
  Rng rng(31);
  const int n = 12, d = 3;
  Mat x = testsup::random_mat(rng, n, d, 1.0);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) y[i] = i % 2;

  SUBCASE("taking everything returns the dataset in some order") {
    Coreset c = corevi::init_coreset(InitStrategy::kSubset, x, y, n, 2, 7);
    REQUIRE(c.size() == n);
    std::set<int> matched;
    for (int m = 0; m < n; ++m) {
      bool found = false;
      for (int i = 0; i < n && !found; ++i) {
        if (matched.count(i)) continue;
        if ((c.u.row(m) - x.row(i)).cwiseAbs().maxCoeff() == 0.0 && c.z[m] == y[i]) {
          matched.insert(i);
          found = true;
        }
      }
      CHECK(found);
    }
    CHECK(matched.size() == static_cast<size_t>(n));
  }
  SUBCASE("four from two classes means two per class") {
    Coreset c = corevi::init_coreset(InitStrategy::kSubset, x, y, 4, 2, 7);
    int per_class[2] = {0, 0};
    for (int z : c.z) ++per_class[z];
    CHECK(per_class[0] == 2);
    CHECK(per_class[1] == 2);
  }
  SUBCASE("identical seeds replay identically") {
    Coreset a = corevi::init_coreset(InitStrategy::kSubset, x, y, 6, 2, 99);
    Coreset b = corevi::init_coreset(InitStrategy::kSubset, x, y, 6, 2, 99);
    CHECK(a.u == b.u);
    CHECK(a.z == b.z);
  }
  SUBCASE("oversized or classless requests throw") {
    CHECK_THROWS(corevi::init_coreset(InitStrategy::kSubset, x, y, n + 1, 2, 7));
    std::vector<int> onehot_labels(n, 0);
    CHECK_THROWS(corevi::init_coreset(InitStrategy::kSubset, x, onehot_labels, 4, 2, 7));
  }
}

TEST_CASE("gaussian initialization draws round-robin classes around class means") {
  Rng rng(77);
  const int n = 40, d = 2, classes = 4;
  Mat x = testsup::random_mat(rng, n, d, 2.0);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) y[i] = i % classes;
  Coreset c = corevi::init_coreset(InitStrategy::kGaussian, x, y, 20, classes, 11);
  REQUIRE(c.size() == 20);
  int per_class[4] = {0, 0, 0, 0};
  for (int z : c.z) ++per_class[z];
  for (int cls = 0; cls < classes; ++cls) CHECK(per_class[cls] == 5);
  CHECK(c.u.allFinite());
  Coreset again = corevi::init_coreset(InitStrategy::kGaussian, x, y, 20, classes, 11);
  CHECK(c.u == again.u);
}

TEST_CASE("gradients flow through the weight parametrizations") {
  Model model(ModelSpec::logistic(2, 1.0));
  Rng rng(13);
  auto build = [&](Tape& t, const Coreset& c) {
    auto nodes = corevi::register_coreset(t, c);
    auto theta = t.constant(testsup::random_mat(rng, 2, 3, 0.5));
    auto wll = corevi::weighted_coreset_loglik(t, model, theta, c, nodes);
    return t.reduce_sum(wll, corevi::ad::Axis::kAll);
  };
  SUBCASE("alpha-scaled softmax: beta, alpha, and locations") {
    Coreset c = basic_coreset(WeightMode::kSoftmaxAlpha, 3, 2, 9.0);
    c.u = testsup::random_mat(rng, 3, 2, 1.0);
    c.z = {0, 1, 0};
    c.beta = testsup::random_mat(rng, 1, 3, 1.0);
    c.alpha = 1.3;
    Tape t;
    auto loss = build(t, c);
    for (const char* name : {"coreset.beta", "coreset.alpha", "coreset.u"}) {
      corevi::ad::NodeId var = t.lookup(name);
      auto grads = t.gradient(loss, {&var, 1});
      const Mat fd = testsup::fd_gradient(t, loss, name);
      CHECK(testsup::max_rel_err(grads[0], fd) < 1e-6);
    }
  }
  SUBCASE("free weights") {
    Coreset c = basic_coreset(WeightMode::kFreeNonneg, 3, 2, 9.0);
    c.u = testsup::random_mat(rng, 3, 2, 1.0);
    c.z = {1, 0, 1};
    c.v_raw << 0.5, 2.0, 1.25;
    Tape t;
    auto loss = build(t, c);
    corevi::ad::NodeId var = t.lookup("coreset.v");
    auto grads = t.gradient(loss, {&var, 1});
    const Mat fd = testsup::fd_gradient(t, loss, "coreset.v");
    CHECK(testsup::max_rel_err(grads[0], fd) < 1e-6);
  }
  SUBCASE("soft labels: logits receive gradients") {
    Coreset c = basic_coreset(WeightMode::kSoftmax, 3, 2, 9.0);
    c.u = testsup::random_mat(rng, 3, 2, 1.0);
    c.soft_labels = true;
    c.train_z = true;
    c.z_logits = testsup::random_mat(rng, 3, 2, 1.0);
    Tape t;
    auto loss = build(t, c);
    corevi::ad::NodeId var = t.lookup("coreset.z_logits");
    auto grads = t.gradient(loss, {&var, 1});
    const Mat fd = testsup::fd_gradient(t, loss, "coreset.z_logits");
    CHECK(testsup::max_rel_err(grads[0], fd) < 1e-6);
  }
}

TEST_CASE("frozen fields register as constants") {
  Coreset c = basic_coreset(WeightMode::kSoftmax, 2, 2, 4.0);
  c.u << 0.1, 0.2, 0.3, 0.4;
  c.z = {0, 1};
  c.train_u = false;
  c.train_weights = true;
  Tape t;
  corevi::register_coreset(t, c);
  CHECK(t.lookup("coreset.u") == corevi::ad::kNoNode);
  CHECK(t.lookup("coreset.beta") != corevi::ad::kNoNode);
}

TEST_CASE("json round-trip preserves every field exactly") {
  Rng rng(101);
  Coreset c = basic_coreset(WeightMode::kSoftmaxAlpha, 3, 2, 17.0);
  c.u = testsup::random_mat(rng, 3, 2, 1.0);
  c.u(0, 0) = 0.1 + 0.2;  // a value without a short decimal form
  c.z = {2, 0, 1};
  c.beta = testsup::random_mat(rng, 1, 3, 1.0);
  c.v_raw = testsup::random_mat(rng, 1, 3, 1.0).cwiseAbs();
  c.alpha = 0.7231461877534;
  c.seed = 424242;
  c.model_hash = ModelSpec::logistic(2, 1.0).hash();
  c.train_alpha = false;

  const std::string text = corevi::coreset_to_json(c);
  Coreset r = corevi::coreset_from_json(text);
  CHECK(r.u == c.u);
  CHECK(r.z == c.z);
  CHECK(r.beta == c.beta);
  CHECK(r.v_raw == c.v_raw);
  CHECK(r.alpha == c.alpha);
  CHECK(r.n_data == c.n_data);
  CHECK(r.seed == c.seed);
  CHECK(r.model_hash == c.model_hash);
  CHECK(r.mode == c.mode);
  CHECK(r.soft_labels == c.soft_labels);
  CHECK(r.train_u == c.train_u);
  CHECK(r.train_alpha == c.train_alpha);

  SUBCASE("soft-label variant and file round-trip") {
    c.soft_labels = true;
    c.z_logits = testsup::random_mat(rng, 3, 4, 1.0);
    const std::string path = "coreset_roundtrip_test.json";
    corevi::save_coreset(c, path);
    Coreset f = corevi::load_coreset(path);
    CHECK(f.z_logits == c.z_logits);
    CHECK(f.u == c.u);
    std::remove(path.c_str());
  }
}
