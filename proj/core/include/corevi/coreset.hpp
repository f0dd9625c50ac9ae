#pragma once

#include "corevi/model.hpp"
#include "corevi/rng.hpp"
#include "corevi/tape.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace corevi {

// How the per-point likelihood weights v are parametrized (all modes keep
// v >= 0 by construction or projection).
enum class WeightMode { kFixedRatio, kFreeNonneg, kSoftmax, kSoftmaxAlpha, kUnit };

enum class InitStrategy { kSubset, kGaussian };

const char* to_string(WeightMode mode);
WeightMode weight_mode_from_string(const std::string& s);

// Learnable summary of the dataset: pseudo-inputs u, outputs z (hard class
// indices or soft-label logits), and the weight machinery.
struct Coreset {
  ad::Mat u;  // M x D
  std::vector<int> z;
  bool soft_labels = false;
  ad::Mat z_logits;  // M x C, soft mode only

  WeightMode mode = WeightMode::kSoftmax;
  ad::Mat beta;   // 1 x M logits (softmax modes)
  ad::Mat v_raw;  // 1 x M non-negative weights (free mode)
  double alpha = 1.0;

  double n_data = 0.0;  // N of the dataset this summarizes
  std::uint64_t seed = 0;
  std::uint64_t model_hash = 0;

  bool train_u = true;
  bool train_z = false;
  bool train_weights = true;
  bool train_alpha = true;

  int size() const { return static_cast<int>(u.rows()); }
  int dim() const { return static_cast<int>(u.cols()); }

  // Numeric weights, same formulas as the graph materialization.
  ad::Mat weights_value() const;
};

// Tape handles after registering one coreset; trainable fields become named
// variables "<prefix>.u" etc., fixed fields become constants.
struct CoresetNodes {
  ad::NodeId u = ad::kNoNode;
  ad::NodeId z_logits = ad::kNoNode;
  ad::NodeId beta = ad::kNoNode;
  ad::NodeId v_raw = ad::kNoNode;
  ad::NodeId alpha = ad::kNoNode;
  ad::NodeId weights = ad::kNoNode;          // 1 x M row
  ad::NodeId label_probs = ad::kNoNode;      // M x C, soft mode
  ad::NodeId label_log_probs = ad::kNoNode;  // M x C, soft mode
  bool empty = false;                        // M == 0
};

CoresetNodes register_coreset(ad::Tape& t, const Coreset& c, const std::string& prefix = "coreset");

// 1 x M row of materialized weights from the mode's parameters:
// fixed-ratio (N/M) 1, free v_raw, softmax N softmax(beta),
// softmax-alpha alpha N softmax(beta), unit 1.
ad::NodeId materialize_weights(ad::Tape& t, const Coreset& c, const CoresetNodes& nodes);

// K x 1 column sum_i v_i log p(z_i | u_i, theta_k); soft labels contribute
// their cross-entropy-minus-entropy form. Empty coreset gives exact zeros.
ad::NodeId weighted_coreset_loglik(ad::Tape& t, const Model& model, ad::NodeId theta,
                                   const Coreset& c, const CoresetNodes& nodes);

// Stratified data subset or Gaussian draws around class means. Labels:
// subset copies data labels; gaussian assigns round-robin classes.
Coreset init_coreset(InitStrategy strategy, const ad::Mat& X, const std::vector<int>& y,
                     int coreset_size, int classes, std::uint64_t seed);

// JSON round-trip, exact for doubles.
std::string coreset_to_json(const Coreset& c);
Coreset coreset_from_json(const std::string& text);
void save_coreset(const Coreset& c, const std::string& path);
Coreset load_coreset(const std::string& path);

}  // namespace corevi
