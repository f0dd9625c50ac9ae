#pragma once

#include "corevi/tape.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace corevi {

enum class ModelKind { kLogistic, kBnn };
enum class Activation { kTanh, kRelu };

// Named slice of the flat parameter vector (layout documentation + the
// handle used by tests to permute or inspect single layers).
struct ParamSlice {
  std::string name;
  int offset;
  int length;
};

struct ModelSpec {
  ModelKind kind = ModelKind::kLogistic;
  int input_dim = 2;
  int classes = 2;
  std::vector<int> hidden;  // BNN hidden-layer widths; empty for logistic
  Activation activation = Activation::kTanh;
  // Isotropic prior std; per-layer overrides (one entry per weight layer,
  // applied to that layer's weights and biases) win when non-empty.
  double prior_std = 1.0;
  std::vector<double> prior_std_layers;

  static ModelSpec logistic(int input_dim, double prior_std = 1.0);
  static ModelSpec bnn(int input_dim, int classes, int hidden_units,
                       Activation act = Activation::kTanh, double prior_std = 1.0);

  std::string canonical_string() const;
  std::uint64_t hash() const;
};

// Differentiable graph builders for the supported likelihoods. Parameters
// are handled as K x P matrices (one posterior sample per row) so every
// builder yields per-sample columns ready for sample averaging.
class Model {
 public:
  explicit Model(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  int param_count() const { return param_count_; }
  const std::vector<ParamSlice>& shape_map() const { return slices_; }

  // K x 1 column of log N(theta_k; 0, diag(prior stds^2)).
  ad::NodeId log_prior(ad::Tape& t, ad::NodeId theta) const;

  // K x M matrix, entry (k, m) = log p(y_m | x_m, theta_k).
  // X is an M x D node (constant or trainable), y are hard class indices.
  ad::NodeId loglik_matrix(ad::Tape& t, ad::NodeId theta, ad::NodeId X,
                           const std::vector<int>& y) const;

  // Soft-label variant: label_probs / label_log_probs are M x C nodes with
  // rows p(. | z_m). Entry (k, m) = sum_c p(c|z_m) [log p(c|x_m,theta_k)
  // - log p(c|z_m)], the negated per-point KL bound. One-hot rows recover
  // loglik_matrix exactly (the entropy term vanishes).
  ad::NodeId loglik_matrix_soft(ad::Tape& t, ad::NodeId theta, ad::NodeId X,
                                ad::NodeId label_probs, ad::NodeId label_log_probs) const;

  // M x C log class probabilities for a single parameter row (1 x P).
  ad::NodeId log_class_probs(ad::Tape& t, ad::NodeId theta_row, ad::NodeId X) const;

  // Numeric conveniences (fresh scratch tape inside).
  double log_likelihood_point(const Eigen::RowVectorXd& theta, const Eigen::RowVectorXd& x,
                              int y) const;
  Eigen::RowVectorXd predict_prob(const Eigen::RowVectorXd& theta,
                                  const Eigen::RowVectorXd& x) const;

  // 1 x P row of per-parameter prior stds (layer overrides expanded).
  const ad::Mat& prior_std_row() const { return prior_std_row_; }

 private:
  ModelSpec spec_;
  int param_count_ = 0;
  std::vector<ParamSlice> slices_;
  ad::Mat prior_std_row_;
};

}  // namespace corevi
