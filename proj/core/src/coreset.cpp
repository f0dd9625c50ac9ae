#include "corevi/coreset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace corevi {

namespace {

using nlohmann::json;

json mat_to_json(const ad::Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

ad::Mat mat_from_json(const json& rows, int expect_cols = -1) {
  if (!rows.is_array()) throw std::runtime_error("coreset json: matrix field is not an array");
  const int r = static_cast<int>(rows.size());
  int c = expect_cols;
  if (r > 0) {
    if (!rows[0].is_array()) throw std::runtime_error("coreset json: matrix row is not an array");
    c = static_cast<int>(rows[0].size());
  }
  if (c < 0) c = 0;
  ad::Mat m(r, c);
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(rows[i].size()) != c)
      throw std::runtime_error("coreset json: ragged matrix rows");
    for (int j = 0; j < c; ++j) m(i, j) = rows[i][j].get<double>();
  }
  return m;
}

ad::Mat softmax_row(const ad::Mat& beta) {
  const double mx = beta.maxCoeff();
  ad::Mat e = (beta.array() - mx).exp().matrix();
  return e / e.sum();
}

}  // namespace

const char* to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::kFixedRatio: return "fixed-ratio";
    case WeightMode::kFreeNonneg: return "free";
    case WeightMode::kSoftmax: return "softmax";
    case WeightMode::kSoftmaxAlpha: return "softmax-alpha";
    case WeightMode::kUnit: return "unit";
  }
  throw std::runtime_error("unknown weight mode");
}

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "fixed-ratio") return WeightMode::kFixedRatio;
  if (s == "free") return WeightMode::kFreeNonneg;
  if (s == "softmax") return WeightMode::kSoftmax;
  if (s == "softmax-alpha") return WeightMode::kSoftmaxAlpha;
  if (s == "unit") return WeightMode::kUnit;
  throw std::runtime_error("unknown weight mode: " + s);
}

ad::Mat Coreset::weights_value() const {
  const int m = size();
  if (m == 0) return ad::Mat(1, 0);
  switch (mode) {
    case WeightMode::kFixedRatio:
      return ad::Mat::Constant(1, m, n_data / m);
    case WeightMode::kFreeNonneg:
      return v_raw;  // kept non-negative by projection after each step
    case WeightMode::kSoftmax:
      return n_data * softmax_row(beta);
    case WeightMode::kSoftmaxAlpha:
      return alpha * n_data * softmax_row(beta);
    case WeightMode::kUnit:
      return ad::Mat::Ones(1, m);
  }
  throw std::runtime_error("unknown weight mode");
}

CoresetNodes register_coreset(ad::Tape& t, const Coreset& c, const std::string& prefix) {
  CoresetNodes nodes;
  const int m = c.size();
  if (m == 0) {
    nodes.empty = true;
    return nodes;
  }
  auto reg = [&](const ad::Mat& value, const std::string& field, bool trainable) {
    return trainable ? t.variable(prefix + "." + field, value) : t.constant(value);
  };
  nodes.u = reg(c.u, "u", c.train_u);
  if (c.soft_labels) {
    if (c.z_logits.rows() != m)
      throw std::runtime_error("coreset: z_logits rows must match coreset size");
    nodes.z_logits = reg(c.z_logits, "z_logits", c.train_z);
    nodes.label_log_probs = t.log_softmax(nodes.z_logits, ad::Axis::kCols);
    nodes.label_probs = t.exp(nodes.label_log_probs);
  } else if (static_cast<int>(c.z.size()) != m) {
    throw std::runtime_error("coreset: z must have one label per point");
  }
  const bool uses_beta = c.mode == WeightMode::kSoftmax || c.mode == WeightMode::kSoftmaxAlpha;
  if (uses_beta) {
    if (c.beta.rows() != 1 || c.beta.cols() != m)
      throw std::runtime_error("coreset: beta must be 1 x M");
    nodes.beta = reg(c.beta, "beta", c.train_weights);
  }
  if (c.mode == WeightMode::kFreeNonneg) {
    if (c.v_raw.rows() != 1 || c.v_raw.cols() != m)
      throw std::runtime_error("coreset: v_raw must be 1 x M");
    nodes.v_raw = reg(c.v_raw, "v", c.train_weights);
  }
  if (c.mode == WeightMode::kSoftmaxAlpha) {
    ad::Mat a(1, 1);
    a(0, 0) = c.alpha;
    nodes.alpha = reg(a, "alpha", c.train_alpha);
  }
  nodes.weights = materialize_weights(t, c, nodes);
  return nodes;
}

ad::NodeId materialize_weights(ad::Tape& t, const Coreset& c, const CoresetNodes& nodes) {
  const int m = c.size();
  if (m == 0) throw std::runtime_error("materialize_weights: empty coreset");
  switch (c.mode) {
    case WeightMode::kFixedRatio:
      return t.constant(ad::Mat::Constant(1, m, c.n_data / m));
    case WeightMode::kFreeNonneg:
      return nodes.v_raw;
    case WeightMode::kSoftmax:
      return t.scale(t.softmax(nodes.beta, ad::Axis::kAll), c.n_data);
    case WeightMode::kSoftmaxAlpha:
      return t.mul(nodes.alpha, t.scale(t.softmax(nodes.beta, ad::Axis::kAll), c.n_data));
    case WeightMode::kUnit:
      return t.constant(ad::Mat::Ones(1, m));
  }
  throw std::runtime_error("unknown weight mode");
}

ad::NodeId weighted_coreset_loglik(ad::Tape& t, const Model& model, ad::NodeId theta,
                                   const Coreset& c, const CoresetNodes& nodes) {
  const auto [k, p] = t.shape(theta);
  (void)p;
  if (nodes.empty) return t.constant(ad::Mat::Zero(k, 1));
  ad::NodeId ll;  // K x M
  if (c.soft_labels) {
    ll = model.loglik_matrix_soft(t, theta, nodes.u, nodes.label_probs, nodes.label_log_probs);
  } else {
    ll = model.loglik_matrix(t, theta, nodes.u, c.z);
  }
  return t.reduce_sum(t.mul(ll, nodes.weights), ad::Axis::kCols);
}

Coreset init_coreset(InitStrategy strategy, const ad::Mat& X, const std::vector<int>& y,
                     int coreset_size, int classes, std::uint64_t seed) {
  const int n = static_cast<int>(X.rows());
  const int d = static_cast<int>(X.cols());
  if (n == 0) throw std::runtime_error("init_coreset: empty dataset");
  if (static_cast<int>(y.size()) != n)
    throw std::runtime_error("init_coreset: label count must match rows");
  if (classes < 2) throw std::runtime_error("init_coreset: need at least two classes");
  if (coreset_size < 1) throw std::runtime_error("init_coreset: coreset size must be positive");
  for (int i = 0; i < n; ++i)
    if (y[i] < 0 || y[i] >= classes) throw std::runtime_error("init_coreset: label out of range");

  std::vector<std::vector<int>> by_class(classes);
  for (int i = 0; i < n; ++i) by_class[y[i]].push_back(i);
  for (int cls = 0; cls < classes; ++cls)
    if (by_class[cls].empty())
      throw std::runtime_error("init_coreset: class " + std::to_string(cls) + " has no points");

  Coreset c;
  c.seed = seed;
  c.n_data = static_cast<double>(n);
  auto rng = Rng::stream(seed, "init");

  if (strategy == InitStrategy::kSubset) {
    if (coreset_size > n)
      throw std::runtime_error("init_coreset: subset size exceeds dataset size");
    // Per-class quotas M/C with the remainder to the lowest class indices;
    // deficits of small classes spill to later classes deterministically.
    std::vector<int> quota(classes, coreset_size / classes);
    for (int cls = 0; cls < coreset_size % classes; ++cls) ++quota[cls];
    int deficit = 0;
    for (int cls = 0; cls < classes; ++cls) {
      const int have = static_cast<int>(by_class[cls].size());
      if (quota[cls] > have) {
        deficit += quota[cls] - have;
        quota[cls] = have;
      }
    }
    while (deficit > 0) {
      bool placed = false;
      for (int cls = 0; cls < classes && deficit > 0; ++cls) {
        if (quota[cls] < static_cast<int>(by_class[cls].size())) {
          ++quota[cls];
          --deficit;
          placed = true;
        }
      }
      if (!placed) throw std::runtime_error("init_coreset: subset size exceeds dataset size");
    }
    std::vector<int> chosen;
    chosen.reserve(coreset_size);
    for (int cls = 0; cls < classes; ++cls) {
      auto pick = rng.sample_without_replacement(static_cast<int>(by_class[cls].size()), quota[cls]);
      std::sort(pick.begin(), pick.end());
      for (int idx : pick) chosen.push_back(by_class[cls][idx]);
    }
    c.u = ad::Mat(coreset_size, d);
    c.z.resize(coreset_size);
    for (int m = 0; m < coreset_size; ++m) {
      c.u.row(m) = X.row(chosen[m]);
      c.z[m] = y[chosen[m]];
    }
  } else {
    ad::Mat class_mean = ad::Mat::Zero(classes, d);
    for (int cls = 0; cls < classes; ++cls) {
      for (int idx : by_class[cls]) class_mean.row(cls) += X.row(idx);
      class_mean.row(cls) /= static_cast<double>(by_class[cls].size());
    }
    ad::Mat mean = X.colwise().mean();
    ad::Mat std_dev(1, d);
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const double dv = X(i, j) - mean(0, j);
        s += dv * dv;
      }
      std_dev(0, j) = n > 1 ? std::sqrt(s / (n - 1)) : 1.0;
      if (std_dev(0, j) <= 0.0) std_dev(0, j) = 1.0;
    }
    c.u = ad::Mat(coreset_size, d);
    c.z.resize(coreset_size);
    for (int m = 0; m < coreset_size; ++m) {
      const int cls = m % classes;
      c.z[m] = cls;
      for (int j = 0; j < d; ++j)
        c.u(m, j) = class_mean(cls, j) + std_dev(0, j) * rng.normal();
    }
  }

  const int m = c.size();
  c.beta = ad::Mat::Zero(1, m);
  c.v_raw = ad::Mat::Constant(1, m, c.n_data / m);
  return c;
}

std::string coreset_to_json(const Coreset& c) {
  json j;
  j["m"] = c.size();
  j["d"] = c.dim();
  j["u"] = mat_to_json(c.u);
  j["z"] = c.z;
  j["soft_labels"] = c.soft_labels;
  if (c.soft_labels) j["z_logits"] = mat_to_json(c.z_logits);
  j["mode"] = to_string(c.mode);
  j["beta"] = mat_to_json(c.beta);
  j["v_raw"] = mat_to_json(c.v_raw);
  j["alpha"] = c.alpha;
  j["n_data"] = c.n_data;
  j["seed"] = c.seed;
  j["model_hash"] = c.model_hash;
  j["train_u"] = c.train_u;
  j["train_z"] = c.train_z;
  j["train_weights"] = c.train_weights;
  j["train_alpha"] = c.train_alpha;
  return j.dump(2);
}

Coreset coreset_from_json(const std::string& text) {
  json j = json::parse(text);
  Coreset c;
  c.u = mat_from_json(j.at("u"), j.value("d", -1));
  c.z = j.at("z").get<std::vector<int>>();
  c.soft_labels = j.at("soft_labels").get<bool>();
  if (c.soft_labels) c.z_logits = mat_from_json(j.at("z_logits"));
  c.mode = weight_mode_from_string(j.at("mode").get<std::string>());
  c.beta = mat_from_json(j.at("beta"));
  c.v_raw = mat_from_json(j.at("v_raw"));
  c.alpha = j.at("alpha").get<double>();
  c.n_data = j.at("n_data").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.model_hash = j.at("model_hash").get<std::uint64_t>();
  c.train_u = j.at("train_u").get<bool>();
  c.train_z = j.at("train_z").get<bool>();
  c.train_weights = j.at("train_weights").get<bool>();
  c.train_alpha = j.at("train_alpha").get<bool>();
  if (j.at("m").get<int>() != c.size())
    throw std::runtime_error("coreset json: size field disagrees with u");
  return c;
}

void save_coreset(const Coreset& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << coreset_to_json(c) << "\n";
}

Coreset load_coreset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return coreset_from_json(ss.str());
}

}  // namespace corevi
