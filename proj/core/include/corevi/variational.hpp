#pragma once

#include "corevi/rng.hpp"
#include "corevi/tape.hpp"

namespace corevi {

// Mean-field Gaussian r(theta; psi) over the flat parameter vector.
struct VariationalGaussian {
  ad::Mat means;     // 1 x P
  ad::Mat log_stds;  // 1 x P

  static VariationalGaussian init(int param_count, double sigma0);
  int dim() const { return static_cast<int>(means.cols()); }
};

// Tape handles for one registration of psi (variables when trainable).
struct VariationalNodes {
  ad::NodeId means = ad::kNoNode;
  ad::NodeId log_stds = ad::kNoNode;
};

// Registers psi as named variables "<prefix>.means" / "<prefix>.log_stds".
VariationalNodes register_variational(ad::Tape& t, const VariationalGaussian& psi,
                                      const std::string& prefix = "psi");

// K x P standard-normal noise with one fresh draw per entry.
ad::Mat noise_matrix(Rng& rng, int k, int p);

// theta_k = means + exp(log_stds) .* eps_k, reparameterized; noise is a
// K x P constant so gradients flow only into psi.
ad::NodeId sample_theta(ad::Tape& t, const VariationalNodes& psi, const ad::Mat& noise);

// K x 1 column of log r(theta_k; psi), with normalization constant.
ad::NodeId log_density(ad::Tape& t, const VariationalNodes& psi, ad::NodeId theta);

// Closed-form KL(r(.; psi) || N(0, diag(prior_std_row^2))), a scalar node.
ad::NodeId kl_to_prior(ad::Tape& t, const VariationalNodes& psi, const ad::Mat& prior_std_row);

// Numeric twin of kl_to_prior for diagnostics.
double kl_to_prior_value(const VariationalGaussian& psi, const ad::Mat& prior_std_row);

}  // namespace corevi
