#pragma once

#include <corevi/rng.hpp>
#include <corevi/tape.hpp>

#include <map>
#include <string>

namespace testsup {

using corevi::ad::Mat;
using corevi::ad::NodeId;
using corevi::ad::Tape;

inline Mat random_mat(corevi::Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  }
  return m;
}

inline std::map<std::string, Mat> current_bindings(const Tape& t) {
  std::map<std::string, Mat> b;
  for (const auto& [name, id] : t.variables()) b[name] = t.value(id);
  return b;
}

// Central finite differences of a scalar output w.r.t. one named variable,
// via whole-tape re-evaluation. Used as the reference for every gradient
// test; it exercises no reverse-mode code at all.
inline Mat fd_gradient(Tape& t, NodeId output, const std::string& name, double h = 1e-6) {
  auto bindings = current_bindings(t);
  const Mat base = bindings.at(name);
  Mat g(base.rows(), base.cols());
  for (Eigen::Index j = 0; j < base.cols(); ++j) {
    for (Eigen::Index i = 0; i < base.rows(); ++i) {
      const double step = h * std::max(1.0, std::abs(base(i, j)));
      bindings[name](i, j) = base(i, j) + step;
      t.evaluate(bindings);
      const double up = t.value(output)(0, 0);
      bindings[name](i, j) = base(i, j) - step;
      t.evaluate(bindings);
      const double down = t.value(output)(0, 0);
      g(i, j) = (up - down) / (2.0 * step);
      bindings[name](i, j) = base(i, j);
    }
  }
  t.evaluate(bindings);
  return g;
}

// max_ij |a - b| / max(1, |b|): relative where the reference is large,
// absolute where it is near zero.
inline double max_rel_err(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double denom = std::max(1.0, std::abs(b(i, j)));
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
    }
  }
  return worst;
}

}  // namespace testsup
