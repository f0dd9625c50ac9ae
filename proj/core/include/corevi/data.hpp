#pragma once

#include "corevi/tape.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace corevi {

// Immutable once loaded: dense features, integer class labels in [0, C).
struct Dataset {
  ad::Mat X;  // N x D
  std::vector<int> y;
  std::vector<std::string> feature_names;
  std::string split = "full";

  int n() const { return static_cast<int>(X.rows()); }
  int dim() const { return static_cast<int>(X.cols()); }
  int classes() const;

  // Throws on NaN/Inf features, negative labels, or X/y length mismatch.
  void validate() const;
};

// Sparse "label idx:val ..." text with 1-based indices; labels -1/+1 map to
// 0/1, other non-negative integers pass through. declared_dim pads (or, when
// exceeded, rejects) the inferred width. Errors carry the 1-based line number.
Dataset load_libsvm(const std::string& path, int declared_dim = 0);

// Comma-separated values with a header row; the column named "label" holds
// the class, every other column is a feature (names recorded in order).
Dataset load_csv(const std::string& path);

// Two interleaved unit semicircles, centers (0,0) and (1,0.5), plus isotropic
// Gaussian noise. Class 0 is the upper arc; counts differ by at most one.
Dataset gen_half_moon(int n, double noise_std, std::uint64_t seed);

// Four Gaussian blobs at the corners (+-center_scale, +-center_scale), one
// class per corner, balanced up to remainder.
Dataset gen_four_class(int n, std::uint64_t seed, double center_scale = 2.0,
                       double blob_std = 1.0);

// x ~ N(0, I_d), y ~ Bernoulli(sigmoid(5 * sum_j x_j)); no bias term.
Dataset gen_synthetic_logreg(int n, int d, std::uint64_t seed);

// Shuffled disjoint exhaustive split; test gets round(n * test_fraction)
// rows. Split tags become "train" / "test".
std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed);

// Per-feature affine map fitted on training data only. Zero-variance
// features keep mean 0 / std 1, so they pass through unchanged.
struct Scaler {
  ad::Mat mean;  // 1 x D
  ad::Mat std;   // 1 x D, strictly positive
};

Scaler fit_scaler(const ad::Mat& X);
ad::Mat apply_scaler(const Scaler& s, const ad::Mat& X);
ad::Mat invert_scaler(const Scaler& s, const ad::Mat& X);

// Fits on train, rewrites train and every listed dataset in place.
Scaler standardize(Dataset& train, const std::vector<Dataset*>& others = {});

// Compares against the published row/dimension counts for the named public
// dataset; on mismatch warns to stderr and returns false instead of failing
// (upstream files drift). Unknown names pass silently.
bool check_known_counts(const Dataset& d, const std::string& name);

}  // namespace corevi
