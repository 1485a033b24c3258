#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "mat/errors.hpp"

namespace mat {

/// Counter-based generator: output n is a SplitMix64 finalizer applied to
/// key + n * golden gamma. Streams are derived by re-keying, so any stream is
/// addressable without advancing another. All distributions below are
/// implemented here (not via <random>) so sequences are bitwise identical
/// across standard libraries.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  /// Independent stream for a sub-task (per video, per epoch, ...).
  [[nodiscard]] CounterRng derive(std::uint64_t stream) const {
    CounterRng out;
    out.key_ = mix(key_ ^ mix(stream + 0x9e3779b97f4a7c15ULL));
    return out;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled to stay unbiased.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: empty range");
    const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Gamma(shape, 1) by Marsaglia-Tsang, with the shape < 1 boost.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw ContractError("gamma: shape must be positive");
    if (shape < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(std::size_t k, double alpha) {
    std::vector<double> w(k);
    double total = 0.0;
    for (auto& x : w) {
      x = gamma(alpha);
      total += x;
    }
    for (auto& x : w) x /= total;
    return w;
  }

  /// Poisson by Knuth's product method (fine for the small rates used here).
  std::uint32_t poisson(double lambda) {
    if (lambda < 0.0) throw ContractError("poisson: negative rate");
    if (lambda == 0.0) return 0;
    const double limit = std::exp(-lambda);
    std::uint32_t k = 0;
    double p = uniform();
    while (p > limit) {
      ++k;
      p *= uniform();
    }
    return k;
  }

  /// Index drawn from unnormalized non-negative weights.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw ContractError("categorical: weights sum to zero");
    double r = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      r -= weights[i];
      if (r < 0.0) return i;
    }
    // Rounding fell off the end; return the last non-zero weight.
    for (std::size_t i = weights.size(); i-- > 0;) {
      if (weights[i] > 0.0) return i;
    }
    return weights.size() - 1;
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace mat
