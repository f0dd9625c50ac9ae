#pragma once

#include <cstdint>
#include <cmath>
#include <numbers>
#include <string_view>
#include <vector>

namespace corevi {

// Deterministic xoshiro256++ generator with named substreams.
//
// std::mt19937 plus the std:: distributions would not do here: distribution
// output is implementation-defined, so seeds would not reproduce across
// standard libraries. This generator and the Box-Muller transform below are
// fully specified, which keeps every seeded run bit-stable on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    // splitmix64 expansion of the seed into the xoshiro state.
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  // Independent substream for one purpose ("data", "init", "noise", ...).
  // Streams derived from the same base seed but different labels do not
  // collide: the label hash perturbs the seed before state expansion.
  static Rng stream(std::uint64_t base_seed, std::string_view purpose) {
    std::uint64_t h = fnv1a(purpose);
    std::uint64_t x = base_seed;
    return Rng(splitmix64(x) ^ h);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
  // n << 2^64 but we reject anyway to keep draws exactly uniform.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return draw % n;
  }

  // Standard normal via Box-Muller; draws are cached in pairs.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    have_cached_ = true;
    return radius * std::cos(angle);
  }

  std::vector<double> normals(std::size_t n) {
    std::vector<double> out(n);
    for (auto& v : out) v = normal();
    return out;
  }

  // Fisher-Yates shuffle of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::swap(p[i - 1], p[uniform_int(i)]);
    }
    return p;
  }

  // k distinct indices from 0..n-1, in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    auto p = permutation(n);
    p.resize(k);
    return p;
  }

  // Index draw from unnormalized non-negative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    return weights.size() - 1;
  }

  static constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace corevi
