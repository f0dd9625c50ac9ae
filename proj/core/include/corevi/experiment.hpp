#pragma once

#include "corevi/algorithms.hpp"
#include "corevi/data.hpp"
#include "corevi/predict.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace corevi {

// Flat key=value configuration; dotted keys namespace related settings.
// File grammar: one "key = value" per line, '#' starts a comment, lists are
// comma-separated, booleans are true/false. Unknown keys are rejected.
struct ExperimentConfig {
  std::string name;  // output subdirectory stem; defaults to method-dataset
  std::string dataset = "half-moon";
  int data_n = 1000;
  double data_noise = 0.1;  // half-moon spread
  int data_dim = 2;         // synthetic-logreg dimension
  std::uint64_t data_seed = 0;
  double test_fraction = 0.2;
  bool standardize_features = true;

  std::string model_name = "logistic";  // logistic | bnn
  int hidden_units = 20;
  double prior_std = 1.0;

  std::string method = "bb-psvi";
  std::vector<int> coreset_sizes = {20};
  std::vector<int> prune_schedule;  // bb-sparse-prune; defaults to {M}

  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int eval_samples = 10;
  int jobs = 1;
  std::string out_dir = "runs";

  TrainConfig train;  // weight mode, init, bilevel settings, fit knobs

  int continual_tasks = 3;
  std::vector<int> continual_sizes = {10, 15, 20};
  bool continual_fresh_only = false;

  // Canonical sorted "key = value" lines covering every setting.
  std::string canonical() const;
  // FNV-1a of the canonical text, rendered as 16 hex digits elsewhere.
  std::uint64_t hash() const;
  void validate() const;
};

// Parses file text into key/value pairs; throws with the line number on
// malformed lines or duplicate keys.
std::map<std::string, std::string> parse_key_values(const std::string& text);

// Builds a typed config from key/value pairs (defaults fill the gaps);
// throws on unknown keys or unparseable values.
ExperimentConfig config_from_pairs(const std::map<std::string, std::string>& pairs);

// File text -> typed config.
ExperimentConfig parse_config(const std::string& text);

std::string config_hash_hex(const ExperimentConfig& cfg);

struct TrialResult {
  int coreset_size = 0;
  std::uint64_t seed = 0;
  EvalReport report;
  TrainResult train;
};

struct ExperimentOutcome {
  std::filesystem::path dir;       // unique per config hash
  std::vector<TrialResult> trials; // ordered by (coreset size, seed)
  std::string aggregate_csv;
};

// Where file-backed datasets live: $COREVI_DATA_DIR, or ./data without it.
std::filesystem::path dataset_dir();

// Resolves the configured dataset: generators by name, or files for the
// public datasets (looked up under dataset_dir()), or an explicit
// .csv / .libsvm path. Returns standardized train/test splits.
std::pair<Dataset, Dataset> resolve_dataset(const ExperimentConfig& cfg);

// Trains one (size, seed) trial with the configured method and scores it on
// the test split.
TrialResult run_trial(const ExperimentConfig& cfg, const Dataset& train_set,
                      const Dataset& test_set, int coreset_size, std::uint64_t seed);

// Full protocol: every size x seed, per-trial JSON files, aggregate CSV with
// mean and standard error per size. Rerunning a config rewrites identical
// metric bytes.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// Class-incremental protocol on the four-class generator: past data is
// replaced by multinomial draws from the coreset support, the new class
// arrives with fresh data and fresh pseudopoints, the output layer widens,
// and psi restarts each task. continual_fresh_only drops the replay and the
// carried coreset (the forgetting ablation).
ExperimentOutcome run_continual(const ExperimentConfig& cfg);

// (x1, x2, predictive entropy) rows over a grid plus one row per coreset
// point; single CSV with a leading kind column.
std::string entropy_grid_csv(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                             double x1_min, double x1_max, double x2_min, double x2_max, int res_x,
                             int res_y, int mc_samples, std::uint64_t seed);

// Model spec and fitted state serialization so grid emission can run from a
// stored trial file.
std::string trial_to_json(const ExperimentConfig& cfg, const TrialResult& trial,
                          const ModelSpec& spec);
struct StoredTrial {
  ModelSpec spec;
  VariationalGaussian psi;
  Coreset coreset;
  EvalReport report;
};
StoredTrial trial_from_json(const std::string& text);

// Mean and standard error of the mean; stderr is 0 for a single value.
struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};
MeanStderr mean_stderr(const std::vector<double>& values);

}  // namespace corevi
