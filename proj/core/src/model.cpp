#include "corevi/model.hpp"

#include "corevi/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace corevi {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2*pi)
}

ModelSpec ModelSpec::logistic(int input_dim, double prior_std) {
  ModelSpec s;
  s.kind = ModelKind::kLogistic;
  s.input_dim = input_dim;
  s.classes = 2;
  s.prior_std = prior_std;
  return s;
}

ModelSpec ModelSpec::bnn(int input_dim, int classes, int hidden_units, Activation act,
                         double prior_std) {
  ModelSpec s;
  s.kind = ModelKind::kBnn;
  s.input_dim = input_dim;
  s.classes = classes;
  s.hidden = {hidden_units};
  s.activation = act;
  s.prior_std = prior_std;
  return s;
}

std::string ModelSpec::canonical_string() const {
  std::string out = kind == ModelKind::kLogistic ? "logistic" : "bnn";
  out += " D=" + std::to_string(input_dim) + " C=" + std::to_string(classes);
  out += " hidden=";
  for (int h : hidden) out += std::to_string(h) + ",";
  out += activation == Activation::kTanh ? " act=tanh" : " act=relu";
  out += " prior=" + std::to_string(prior_std);
  for (double s : prior_std_layers) out += "," + std::to_string(s);
  return out;
}

std::uint64_t ModelSpec::hash() const { return Rng::fnv1a(canonical_string()); }

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_dim <= 0) throw std::invalid_argument("model: input_dim must be positive");
  if (spec_.kind == ModelKind::kLogistic) {
    if (spec_.classes != 2) throw std::invalid_argument("model: logistic is binary (C=2)");
    slices_ = {{"w", 0, spec_.input_dim}, {"b", spec_.input_dim, 1}};
    param_count_ = spec_.input_dim + 1;
  } else {
    if (spec_.hidden.empty()) throw std::invalid_argument("model: bnn needs hidden widths");
    if (spec_.classes < 2) throw std::invalid_argument("model: bnn needs C >= 2");
    int offset = 0;
    int in = spec_.input_dim;
    for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
      const int out = spec_.hidden[l];
      slices_.push_back({"w" + std::to_string(l + 1), offset, in * out});
      offset += in * out;
      slices_.push_back({"b" + std::to_string(l + 1), offset, out});
      offset += out;
      in = out;
    }
    const std::string ol = std::to_string(spec_.hidden.size() + 1);
    slices_.push_back({"w" + ol, offset, in * spec_.classes});
    offset += in * spec_.classes;
    slices_.push_back({"b" + ol, offset, spec_.classes});
    offset += spec_.classes;
    param_count_ = offset;
  }

  // Per-parameter prior stds; layer overrides cover that layer's weights
  // and biases. Layer index = slice pair index.
  prior_std_row_ = ad::Mat::Constant(1, param_count_, spec_.prior_std);
  if (!spec_.prior_std_layers.empty()) {
    const std::size_t layers = slices_.size() / 2;
    if (spec_.prior_std_layers.size() != layers) {
      throw std::invalid_argument("model: prior_std_layers must have one entry per layer");
    }
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t s = 2 * l; s < 2 * l + 2; ++s) {
        for (int i = 0; i < slices_[s].length; ++i) {
          prior_std_row_(0, slices_[s].offset + i) = spec_.prior_std_layers[l];
        }
      }
    }
  }
  for (int i = 0; i < param_count_; ++i) {
    if (!(prior_std_row_(0, i) > 0.0)) throw std::invalid_argument("model: prior std must be > 0");
  }
}

ad::NodeId Model::log_prior(ad::Tape& t, ad::NodeId theta) const {
  const auto [k, p] = t.shape(theta);
  if (p != param_count_) throw std::invalid_argument("model: theta length mismatch");
  (void)k;
  const ad::NodeId sigma = t.constant(prior_std_row_);
  const ad::NodeId standardized = t.div(theta, sigma);
  const ad::NodeId quad = t.scale(t.reduce_sum(t.square(standardized), ad::Axis::kCols), -0.5);
  double log_norm = -0.5 * param_count_ * kLog2Pi;
  for (int i = 0; i < param_count_; ++i) log_norm -= std::log(prior_std_row_(0, i));
  return t.add_scalar(quad, log_norm);
}

namespace {

// One-hot rows for hard labels.
ad::Mat onehot_rows(const std::vector<int>& y, int classes) {
  ad::Mat out = ad::Mat::Zero(static_cast<Eigen::Index>(y.size()), classes);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0 || y[i] >= classes) throw std::invalid_argument("model: class index out of range");
    out(static_cast<Eigen::Index>(i), y[i]) = 1.0;
  }
  return out;
}

}  // namespace

ad::NodeId Model::log_class_probs(ad::Tape& t, ad::NodeId theta_row, ad::NodeId X) const {
  const auto [rows, p] = t.shape(theta_row);
  if (rows != 1 || p != param_count_) throw std::invalid_argument("model: need a 1 x P theta row");
  const auto [m, d] = t.shape(X);
  (void)m;
  if (d != spec_.input_dim) throw std::invalid_argument("model: X feature dim mismatch");

  if (spec_.kind == ModelKind::kLogistic) {
    const ad::NodeId w = t.block(theta_row, 0, 0, 1, spec_.input_dim);
    const ad::NodeId b = t.block(theta_row, 0, spec_.input_dim, 1, 1);
    // logits z of class 1: X w^T + b -> M x 1
    const ad::NodeId z = t.add(t.matmul(X, t.transpose(w)), b);
    return t.concat({t.log_sigmoid(t.negate(z)), t.log_sigmoid(z)}, ad::Axis::kCols);
  }

  // Feedforward pass; each layer slice reshaped row-major to (in x out).
  ad::NodeId h = X;
  int in = spec_.input_dim;
  for (std::size_t l = 0; l < spec_.hidden.size(); ++l) {
    const int out = spec_.hidden[l];
    const ParamSlice& ws = slices_[2 * l];
    const ParamSlice& bs = slices_[2 * l + 1];
    const ad::NodeId W = t.reshape(t.block(theta_row, 0, ws.offset, 1, ws.length), in, out);
    const ad::NodeId b = t.block(theta_row, 0, bs.offset, 1, bs.length);
    const ad::NodeId pre = t.add(t.matmul(h, W), b);
    h = spec_.activation == Activation::kTanh ? t.tanh(pre) : t.relu(pre);
    in = out;
  }
  const ParamSlice& ws = slices_[slices_.size() - 2];
  const ParamSlice& bs = slices_[slices_.size() - 1];
  const ad::NodeId W = t.reshape(t.block(theta_row, 0, ws.offset, 1, ws.length), in, spec_.classes);
  const ad::NodeId b = t.block(theta_row, 0, bs.offset, 1, bs.length);
  const ad::NodeId logits = t.add(t.matmul(h, W), b);
  // Normalize across classes within each row.
  return t.log_softmax(logits, ad::Axis::kCols);
}

ad::NodeId Model::loglik_matrix(ad::Tape& t, ad::NodeId theta, ad::NodeId X,
                                const std::vector<int>& y) const {
  const auto [k, p] = t.shape(theta);
  if (p != param_count_) throw std::invalid_argument("model: theta length mismatch");
  const auto [m, d] = t.shape(X);
  if (d != spec_.input_dim) throw std::invalid_argument("model: X feature dim mismatch");
  if (static_cast<Eigen::Index>(y.size()) != m) {
    throw std::invalid_argument("model: label count mismatch");
  }

  if (spec_.kind == ModelKind::kLogistic) {
    // Vectorized over samples: logits (K x M) = W X^T + b, then the signed
    // log-sigmoid trick log p(y|x) = log sigma((2y-1) z).
    const ad::NodeId W = t.block(theta, 0, 0, static_cast<int>(k), spec_.input_dim);
    const ad::NodeId b = t.block(theta, 0, spec_.input_dim, static_cast<int>(k), 1);
    const ad::NodeId logits = t.add(t.matmul(W, t.transpose(X)), b);
    ad::Mat sign(1, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (y[i] != 0 && y[i] != 1) throw std::invalid_argument("model: class index out of range");
      sign(0, i) = y[i] == 1 ? 1.0 : -1.0;
    }
    return t.log_sigmoid(t.mul(logits, t.constant(sign)));
  }

  const ad::NodeId onehot = t.constant(onehot_rows(y, spec_.classes));
  std::vector<ad::NodeId> rows;
  rows.reserve(k);
  for (Eigen::Index s = 0; s < k; ++s) {
    const ad::NodeId lcp = log_class_probs(t, t.row(theta, static_cast<int>(s)), X);
    rows.push_back(t.transpose(t.reduce_sum(t.mul(lcp, onehot), ad::Axis::kCols)));
  }
  return rows.size() == 1 ? rows[0] : t.concat(std::move(rows), ad::Axis::kRows);
}

ad::NodeId Model::loglik_matrix_soft(ad::Tape& t, ad::NodeId theta, ad::NodeId X,
                                     ad::NodeId label_probs, ad::NodeId label_log_probs) const {
  const auto [k, p] = t.shape(theta);
  if (p != param_count_) throw std::invalid_argument("model: theta length mismatch");
  const auto [m, c] = t.shape(label_probs);
  if (c != spec_.classes) throw std::invalid_argument("model: soft label class count mismatch");

  // Per-point negative entropy sum_c p log p, a 1 x M row shared by all k.
  const ad::NodeId neg_entropy =
      t.transpose(t.reduce_sum(t.mul(label_probs, label_log_probs), ad::Axis::kCols));

  std::vector<ad::NodeId> rows;
  rows.reserve(k);
  for (Eigen::Index s = 0; s < k; ++s) {
    const ad::NodeId lcp = log_class_probs(t, t.row(theta, static_cast<int>(s)), X);
    const ad::NodeId xent =
        t.transpose(t.reduce_sum(t.mul(lcp, label_probs), ad::Axis::kCols));
    rows.push_back(t.sub(xent, neg_entropy));
  }
  (void)m;
  return rows.size() == 1 ? rows[0] : t.concat(std::move(rows), ad::Axis::kRows);
}

double Model::log_likelihood_point(const Eigen::RowVectorXd& theta, const Eigen::RowVectorXd& x,
                                   int y) const {
  ad::Tape t;
  const ad::NodeId th = t.constant(theta);
  const ad::NodeId X = t.constant(x);
  const ad::NodeId ll = loglik_matrix(t, th, X, {y});
  return t.value(ll)(0, 0);
}

Eigen::RowVectorXd Model::predict_prob(const Eigen::RowVectorXd& theta,
                                       const Eigen::RowVectorXd& x) const {
  ad::Tape t;
  const ad::NodeId th = t.constant(theta);
  const ad::NodeId X = t.constant(x);
  const ad::NodeId probs = t.exp(log_class_probs(t, th, X));
  return t.value(probs).row(0);
}

}  // namespace corevi
