#include <doctest.h>

#include <corevi/rng.hpp>
#include <corevi/tape.hpp>

#include <cmath>
#include <vector>

#include "support.hpp"

using corevi::Rng;
using corevi::ad::Axis;
using corevi::ad::kNoNode;
using corevi::ad::Mat;
using corevi::ad::NodeId;
using corevi::ad::Tape;
using testsup::fd_gradient;
using testsup::max_rel_err;
using testsup::random_mat;

namespace {

// Weighted scalar wrapper so every output entry influences the objective.
NodeId scalarize(Tape& t, NodeId y, Rng& rng) {
  auto [r, c] = t.shape(y);
  return t.reduce_sum(t.mul(y, t.constant(random_mat(rng, r, c))), Axis::kAll);
}

void expect_fd_match(Tape& t, NodeId out, const std::vector<std::string>& names,
                     double tol = 1e-5) {
  for (const auto& name : names) {
    const NodeId v = t.lookup(name);
    REQUIRE(v != kNoNode);
    const std::vector<NodeId> wrt{v};
    const Mat ad_grad = t.gradient(out, wrt)[0];
    const Mat fd = fd_gradient(t, out, name);
    CAPTURE(name);
    CHECK(max_rel_err(ad_grad, fd) < tol);
  }
}

Eigen::Index broadcast_dim(Rng& rng, Eigen::Index full) {
  return rng.uniform() < 0.3 ? 1 : full;
}

}  // namespace

TEST_CASE("forward evaluation matches hand arithmetic") {
  Tape t;
  const NodeId x = t.variable("x", (Mat(1, 2) << 1.0, 2.0).finished());
  const NodeId y = t.reduce_sum(t.square(x));
  CHECK(t.value(y)(0, 0) == doctest::Approx(5.0).epsilon(1e-12));

  const NodeId z = t.log_sum_exp(t.zeros(1, 2));
  CHECK(t.value(z)(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const NodeId w = t.tanh(t.zeros(1, 1));
  CHECK(t.value(w)(0, 0) == 0.0);
}

TEST_CASE("gradient matches analytic values") {
  Tape t;
  const NodeId x = t.variable("x", (Mat(1, 2) << 1.0, 2.0).finished());
  const NodeId y = t.reduce_sum(t.square(x));
  const std::vector<NodeId> wrt{x};
  const Mat g = t.gradient(y, wrt)[0];
  CHECK(g(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g(0, 1) == doctest::Approx(4.0).epsilon(1e-12));

  const NodeId v = t.variable("v", Mat::Zero(1, 2));
  const NodeId lse = t.log_sum_exp(v);
  const std::vector<NodeId> wrt2{v};
  const Mat g2 = t.gradient(lse, wrt2)[0];
  CHECK(g2(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g2(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  const NodeId s = t.variable("s", Mat::Constant(1, 1, 0.3));
  const NodeId th = t.tanh(s);
  const std::vector<NodeId> wrt3{s};
  const Mat g3 = t.gradient(th, wrt3)[0];
  const double expected = 1.0 - std::tanh(0.3) * std::tanh(0.3);
  CHECK(g3(0, 0) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(g3(0, 0) == doctest::Approx(0.91513).epsilon(1e-4));
}

TEST_CASE("unary primitives match finite differences on 100 random inputs") {
  struct Case {
    const char* label;
    std::function<NodeId(Tape&, NodeId)> build;
    std::function<double(double)> domain;  // maps raw normal draw into the op's domain
  };
  const std::vector<Case> cases{
      {"negate", [](Tape& t, NodeId x) { return t.negate(x); }, [](double v) { return v; }},
      {"exp", [](Tape& t, NodeId x) { return t.exp(x); }, [](double v) { return 0.5 * v; }},
      {"log", [](Tape& t, NodeId x) { return t.log(x); },
       [](double v) { return std::abs(v) + 0.5; }},
      {"tanh", [](Tape& t, NodeId x) { return t.tanh(x); }, [](double v) { return v; }},
      {"relu", [](Tape& t, NodeId x) { return t.relu(x); },
       [](double v) { return v + (v >= 0 ? 0.1 : -0.1); }},
      {"log_sigmoid", [](Tape& t, NodeId x) { return t.log_sigmoid(x); },
       [](double v) { return 3.0 * v; }},
      {"square", [](Tape& t, NodeId x) { return t.square(x); }, [](double v) { return v; }},
      {"sqrt", [](Tape& t, NodeId x) { return t.sqrt(x); },
       [](double v) { return std::abs(v) + 0.5; }},
      {"reciprocal", [](Tape& t, NodeId x) { return t.reciprocal(x); },
       [](double v) { return v + (v >= 0 ? 0.7 : -0.7); }},
      {"scale", [](Tape& t, NodeId x) { return t.scale(x, -2.5); }, [](double v) { return v; }},
      {"add_scalar", [](Tape& t, NodeId x) { return t.add_scalar(x, 1.25); },
       [](double v) { return v; }},
      {"transpose", [](Tape& t, NodeId x) { return t.transpose(x); }, [](double v) { return v; }},
      {"sigmoid-composite", [](Tape& t, NodeId x) { return t.sigmoid(x); },
       [](double v) { return v; }},
      {"softplus-composite", [](Tape& t, NodeId x) { return t.softplus(x); },
       [](double v) { return v; }},
  };

  Rng rng(101);
  for (const auto& c : cases) {
    CAPTURE(c.label);
    for (int rep = 0; rep < 100; ++rep) {
      Tape t;
      const Eigen::Index r = 1 + rng.uniform_int(3);
      const Eigen::Index cdim = 1 + rng.uniform_int(3);
      Mat x0(r, cdim);
      for (Eigen::Index j = 0; j < cdim; ++j) {
        for (Eigen::Index i = 0; i < r; ++i) x0(i, j) = c.domain(rng.normal());
      }
      const NodeId x = t.variable("x", x0);
      const NodeId out = scalarize(t, c.build(t, x), rng);
      expect_fd_match(t, out, {"x"});
    }
  }
}

TEST_CASE("binary primitives broadcast and match finite differences") {
  struct Case {
    const char* label;
    std::function<NodeId(Tape&, NodeId, NodeId)> build;
    bool positive_rhs;
  };
  const std::vector<Case> cases{
      {"add", [](Tape& t, NodeId a, NodeId b) { return t.add(a, b); }, false},
      {"sub", [](Tape& t, NodeId a, NodeId b) { return t.sub(a, b); }, false},
      {"mul", [](Tape& t, NodeId a, NodeId b) { return t.mul(a, b); }, false},
      {"div", [](Tape& t, NodeId a, NodeId b) { return t.div(a, b); }, true},
  };

  Rng rng(202);
  for (const auto& c : cases) {
    CAPTURE(c.label);
    for (int rep = 0; rep < 100; ++rep) {
      Tape t;
      const Eigen::Index r = 1 + rng.uniform_int(3);
      const Eigen::Index cdim = 1 + rng.uniform_int(3);
      Mat a0 = random_mat(rng, broadcast_dim(rng, r), broadcast_dim(rng, cdim));
      Mat b0 = random_mat(rng, broadcast_dim(rng, r), broadcast_dim(rng, cdim));
      if (c.positive_rhs) {
        b0 = (b0.array().abs() + 0.5).matrix();
      }
      const NodeId a = t.variable("a", a0);
      const NodeId b = t.variable("b", b0);
      const NodeId out = scalarize(t, c.build(t, a, b), rng);
      expect_fd_match(t, out, {"a", "b"});
    }
  }
}

TEST_CASE("matmul matches finite differences") {
  Rng rng(303);
  for (int rep = 0; rep < 100; ++rep) {
    Tape t;
    const Eigen::Index m = 1 + rng.uniform_int(3);
    const Eigen::Index k = 1 + rng.uniform_int(3);
    const Eigen::Index n = 1 + rng.uniform_int(3);
    const NodeId a = t.variable("a", random_mat(rng, m, k));
    const NodeId b = t.variable("b", random_mat(rng, k, n));
    const NodeId out = scalarize(t, t.matmul(a, b), rng);
    expect_fd_match(t, out, {"a", "b"});
  }
}

TEST_CASE("reductions and log-sum-exp match finite differences per axis") {
  Rng rng(404);
  const std::vector<Axis> axes{Axis::kAll, Axis::kRows, Axis::kCols};
  for (Axis axis : axes) {
    for (int rep = 0; rep < 100; ++rep) {
      Tape t;
      const Eigen::Index r = 2 + rng.uniform_int(3);
      const Eigen::Index c = 2 + rng.uniform_int(3);
      // Spread values so finite differencing never crosses a max boundary.
      Mat x0(r, c);
      for (Eigen::Index j = 0; j < c; ++j) {
        for (Eigen::Index i = 0; i < r; ++i) {
          x0(i, j) = rng.normal() + 0.01 * static_cast<double>(i * c + j);
        }
      }
      const NodeId x = t.variable("x", x0);
      const NodeId s1 = scalarize(t, t.reduce_sum(x, axis), rng);
      expect_fd_match(t, s1, {"x"});

      Tape t2;
      const NodeId x2 = t2.variable("x", x0);
      const NodeId s2 = scalarize(t2, t2.log_sum_exp(x2, axis), rng);
      expect_fd_match(t2, s2, {"x"});

      Tape t3;
      const NodeId x3 = t3.variable("x", 10.0 * x0);  // widen gaps for max
      const NodeId s3 = scalarize(t3, t3.reduce_max(x3, axis), rng);
      expect_fd_match(t3, s3, {"x"});
    }
  }
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(505);
  for (int rep = 0; rep < 100; ++rep) {
    Tape t;
    const NodeId a = t.variable("a", random_mat(rng, 2, 3));
    const NodeId b = t.variable("b", random_mat(rng, 2, 2));
    const NodeId cat = t.concat({a, b}, Axis::kCols);
    const NodeId out = scalarize(t, cat, rng);
    expect_fd_match(t, out, {"a", "b"});

    Tape t2;
    const NodeId x = t2.variable("x", random_mat(rng, 4, 5));
    const int r0 = static_cast<int>(rng.uniform_int(2));
    const int c0 = static_cast<int>(rng.uniform_int(2));
    const NodeId blk = t2.block(x, r0, c0, 2, 3);
    const NodeId out2 = scalarize(t2, blk, rng);
    expect_fd_match(t2, out2, {"x"});

    Tape t3;
    const NodeId y = t3.variable("y", random_mat(rng, 2, 6));
    const NodeId rs = t3.reshape(y, 3, 4);
    const NodeId out3 = scalarize(t3, rs, rng);
    expect_fd_match(t3, out3, {"y"});

    Tape t4;
    const NodeId p = t4.variable("p", random_mat(rng, 3, 2));
    const NodeId q = t4.variable("q", random_mat(rng, 2, 2));
    const NodeId cat2 = t4.concat({p, q}, Axis::kRows);
    const NodeId out4 = scalarize(t4, cat2, rng);
    expect_fd_match(t4, out4, {"p", "q"});
  }
}

TEST_CASE("reshape reads elements in row-major order") {
  Tape t;
  const NodeId x = t.constant((Mat(2, 2) << 1.0, 2.0, 3.0, 4.0).finished());
  const NodeId y = t.reshape(x, 1, 4);
  const Mat v = t.value(y);
  CHECK(v(0, 0) == 1.0);
  CHECK(v(0, 1) == 2.0);
  CHECK(v(0, 2) == 3.0);
  CHECK(v(0, 3) == 4.0);
}

TEST_CASE("step and argmax-mask carry zero gradient by definition") {
  Tape t;
  const NodeId x = t.variable("x", (Mat(1, 3) << -1.0, 0.0, 2.0).finished());
  const NodeId s = t.reduce_sum(t.step(x));
  CHECK(t.value(s)(0, 0) == 1.0);  // step(0) = 0
  const std::vector<NodeId> wrt{x};
  CHECK(t.gradient(s, wrt)[0].isZero(0.0));

  Rng rng(7);
  const NodeId m =
      t.reduce_sum(t.mul(t.argmax_mask(x, Axis::kAll), t.constant(random_mat(rng, 1, 3))));
  CHECK(t.gradient(m, wrt)[0].isZero(0.0));
}

TEST_CASE("relu gradient at zero is zero and max ties split evenly") {
  Tape t;
  const NodeId x = t.variable("x", Mat::Zero(1, 1));
  const NodeId y = t.relu(x);
  const std::vector<NodeId> wrt{x};
  CHECK(t.gradient(y, wrt)[0](0, 0) == 0.0);

  Tape t2;
  const NodeId v = t2.variable("v", Mat::Ones(1, 2));
  const NodeId mx = t2.reduce_max(v, Axis::kAll);
  const std::vector<NodeId> wrt2{v};
  const Mat g = t2.gradient(mx, wrt2)[0];
  CHECK(g(0, 0) == doctest::Approx(0.5));
  CHECK(g(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("log-sum-exp stays finite for extreme inputs and rejects degenerate slices") {
  Tape t;
  const NodeId big = t.constant((Mat(1, 2) << 1000.0, 999.0).finished());
  const NodeId y = t.log_sum_exp(big);
  CHECK(std::isfinite(t.value(y)(0, 0)));
  CHECK(t.value(y)(0, 0) == doctest::Approx(1000.0 + std::log1p(std::exp(-1.0))).epsilon(1e-12));

  const NodeId zeros = t.constant(Mat::Zero(1, 2));
  const NodeId neg_inf = t.log(zeros);  // -inf entries as computed values
  CHECK_THROWS_AS((void)t.log_sum_exp(neg_inf), std::invalid_argument);
}

TEST_CASE("tape rejects malformed graphs and inputs") {
  Tape t;
  const NodeId a = t.variable("a", Mat::Zero(2, 3));
  const NodeId b = t.variable("b", Mat::Zero(3, 3));
  CHECK_THROWS_AS((void)t.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS((void)t.matmul(a, a), std::invalid_argument);
  CHECK_THROWS_AS((void)t.block(a, 1, 1, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)t.reshape(a, 4, 2), std::invalid_argument);
  Mat bad(1, 1);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)t.constant(bad), std::invalid_argument);

  const std::vector<NodeId> wrt{a};
  CHECK_THROWS_AS((void)t.gradient(a, wrt), std::invalid_argument);  // non-scalar output
}

TEST_CASE("evaluate re-binds variables and is bit-stable") {
  Tape t;
  const NodeId x = t.variable("x", (Mat(1, 2) << 1.0, 2.0).finished());
  const NodeId y = t.reduce_sum(t.square(x));
  CHECK(t.value(y)(0, 0) == 5.0);

  std::map<std::string, Mat> bindings{{"x", (Mat(1, 2) << 3.0, 4.0).finished()}};
  t.evaluate(bindings);
  CHECK(t.value(y)(0, 0) == 25.0);
  const Mat first = t.value(y);
  t.evaluate(bindings);
  CHECK(t.value(y)(0, 0) == first(0, 0));  // exact replay

  CHECK_THROWS_AS(t.evaluate({}), std::invalid_argument);  // unbound variable
  std::map<std::string, Mat> wrong{{"x", Mat::Zero(2, 2)}};
  CHECK_THROWS_AS(t.evaluate(wrong), std::invalid_argument);  // shape mismatch
}

TEST_CASE("backward emits a differentiable gradient graph") {
  // f = x^3 via explicit products; second derivative must be 6x.
  Tape t;
  const NodeId x = t.variable("x", Mat::Constant(1, 1, 1.7));
  const NodeId f = t.mul(t.mul(x, x), x);
  const std::vector<NodeId> wrt{x};
  const std::vector<NodeId> g_ids = t.backward(f, wrt);
  REQUIRE(g_ids[0] != kNoNode);
  CHECK(t.value(g_ids[0])(0, 0) == doctest::Approx(3.0 * 1.7 * 1.7).epsilon(1e-12));

  const Mat h = t.gradient(g_ids[0], wrt)[0];
  CHECK(h(0, 0) == doctest::Approx(6.0 * 1.7).epsilon(1e-12));

  // The emitted gradient also recomputes correctly under fresh bindings.
  const Mat fd = fd_gradient(t, g_ids[0], "x");
  CHECK(max_rel_err(h, fd) < 1e-5);
}

TEST_CASE("gradient of an unrelated variable is zero") {
  Tape t;
  const NodeId x = t.variable("x", Mat::Ones(1, 1));
  const NodeId z = t.variable("z", Mat::Ones(2, 2));
  const NodeId f = t.reduce_sum(t.square(x));
  const std::vector<NodeId> wrt{x, z};
  const auto grads = t.gradient(f, wrt);
  CHECK(grads[0](0, 0) == 2.0);
  CHECK(grads[1].isZero(0.0));
  CHECK(grads[1].rows() == 2);
}

TEST_CASE("mark and truncate roll the tape back") {
  Tape t;
  const NodeId x = t.variable("x", Mat::Ones(1, 1));
  const std::size_t m = t.mark();
  (void)t.variable("tmp", Mat::Zero(1, 1));
  (void)t.square(x);
  CHECK(t.size() == m + 2);
  t.truncate(m);
  CHECK(t.size() == m);
  CHECK(t.lookup("tmp") == kNoNode);
  CHECK(t.lookup("x") == x);
  const NodeId y = t.square(x);  // tape usable after truncation
  CHECK(t.value(y)(0, 0) == 1.0);
}

TEST_CASE("unrolled gradient: one hand-unrolled descent step") {
  // inner loss (psi - phi)^2, lr = 0.5, psi0 = 0: one step lands psi1 = phi.
  // outer L = psi1^2, phi = 1 -> dL/dphi = 2.
  Tape t;
  const NodeId phi = t.variable("phi", Mat::Ones(1, 1));
  const NodeId psi0 = t.variable("psi0", Mat::Zero(1, 1));

  auto inner = [&](Tape& tape, const std::vector<NodeId>& psi, int) {
    const NodeId loss = tape.square(tape.sub(psi[0], phi));
    const auto g = tape.backward(loss, std::vector<NodeId>{psi[0]});
    return std::vector<NodeId>{tape.sub(psi[0], tape.scale(g[0], 0.5))};
  };
  auto outer = [](Tape& tape, const std::vector<NodeId>& psi) { return tape.square(psi[0]); };

  const std::vector<NodeId> wrt{phi};
  const auto result = corevi::ad::unrolled_gradient(t, {psi0}, 1, inner, outer, wrt);
  CHECK(t.value(result.final_params[0])(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(result.grads[0](0, 0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("unrolled gradient with zero steps equals the direct gradient exactly") {
  Tape t;
  const NodeId phi = t.variable("phi", Mat::Constant(1, 1, 0.37));
  const NodeId psi0 = t.variable("psi0", Mat::Constant(1, 1, -0.8));

  auto inner = [&](Tape& tape, const std::vector<NodeId>& psi, int) {
    const NodeId loss = tape.square(tape.sub(psi[0], phi));
    const auto g = tape.backward(loss, std::vector<NodeId>{psi[0]});
    return std::vector<NodeId>{tape.sub(psi[0], tape.scale(g[0], 0.1))};
  };
  auto outer = [&](Tape& tape, const std::vector<NodeId>& psi) {
    return tape.square(tape.sub(psi[0], tape.scale(phi, 2.0)));
  };

  const std::vector<NodeId> wrt{phi};
  const auto unrolled = corevi::ad::unrolled_gradient(t, {psi0}, 0, inner, outer, wrt);

  Tape ref;
  const NodeId phi_r = ref.variable("phi", Mat::Constant(1, 1, 0.37));
  const NodeId psi_r = ref.variable("psi0", Mat::Constant(1, 1, -0.8));
  const NodeId loss_r = ref.square(ref.sub(psi_r, ref.scale(phi_r, 2.0)));
  const std::vector<NodeId> wrt_r{phi_r};
  const Mat direct = ref.gradient(loss_r, wrt_r)[0];

  CHECK(unrolled.grads[0](0, 0) == direct(0, 0));  // exact, same arithmetic
}

TEST_CASE("unrolled gradient approaches the implicit closed form on a quadratic") {
  // inner loss 0.5*a*(psi - c*phi)^2 solved by gradient descent;
  // psi_T = c*phi + (1 - lr*a)^T (psi0 - c*phi).
  // outer L = 0.5*(psi_T - d)^2; implicit solution psi* = c*phi gives
  // dL/dphi = (c*phi - d)*c.
  const double a = 1.3, c = 0.7, d = -0.4, lr = 0.25, phi0 = 0.9, psi_init = -1.1;
  const int T = 50;

  Tape t;
  const NodeId phi = t.variable("phi", Mat::Constant(1, 1, phi0));
  const NodeId psi0 = t.variable("psi0", Mat::Constant(1, 1, psi_init));

  auto inner = [&](Tape& tape, const std::vector<NodeId>& psi, int) {
    const NodeId resid = tape.sub(psi[0], tape.scale(phi, c));
    const NodeId loss = tape.scale(tape.square(resid), 0.5 * a);
    const auto g = tape.backward(loss, std::vector<NodeId>{psi[0]});
    return std::vector<NodeId>{tape.sub(psi[0], tape.scale(g[0], lr))};
  };
  auto outer = [&](Tape& tape, const std::vector<NodeId>& psi) {
    return tape.scale(tape.square(tape.add_scalar(psi[0], -d)), 0.5);
  };

  const std::vector<NodeId> wrt{phi};
  const auto result = corevi::ad::unrolled_gradient(t, {psi0}, T, inner, outer, wrt);

  const double contraction = std::pow(1.0 - lr * a, T);
  const double psi_T = c * phi0 + contraction * (psi_init - c * phi0);
  CHECK(t.value(result.final_params[0])(0, 0) == doctest::Approx(psi_T).epsilon(1e-10));

  const double truncated = (psi_T - d) * c * (1.0 - contraction);
  CHECK(result.grads[0](0, 0) == doctest::Approx(truncated).epsilon(1e-10));

  const double implicit = (c * phi0 - d) * c;
  CHECK(std::abs(result.grads[0](0, 0) - implicit) / std::abs(implicit) < 1e-3);
}

TEST_CASE("broadcast gradients reduce correctly over expanded dims") {
  Rng rng(606);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    const NodeId a = t.variable("a", random_mat(rng, 3, 1));
    const NodeId b = t.variable("b", random_mat(rng, 1, 4));
    const NodeId out = scalarize(t, t.mul(t.add(a, b), t.sub(a, b)), rng);
    expect_fd_match(t, out, {"a", "b"});
  }
}
