#pragma once

// Seeded random streams. Every stochastic component draws from its own
// substream derived from (seed, index) or (seed, name), so adding or
// reordering components never perturbs the draws of another. All
// distributions are generated from explicit algorithms on top of
// mt19937_64, which the standard pins down bit-for-bit.

#include <bit>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "emm/stats.hpp"

namespace emm {

inline std::uint64_t mix_bits(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Child seed for a named component (method, nuisance model, chain).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return mix_bits(mix_bits(seed) ^ fnv1a64(name));
}

// Child seed for an indexed replicate (tree b, permutation r, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix_bits(mix_bits(seed) ^ mix_bits(index * 0x9e3779b97f4a7c15ULL + 0x6a09e667f3bcc909ULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_bits(seed)) {}

  static Rng substream(std::uint64_t seed, std::uint64_t index) { return Rng(derive_seed(seed, index)); }
  static Rng substream(std::uint64_t seed, std::string_view name) { return Rng(derive_seed(seed, name)); }

  // Uniform on the open interval (0,1); never returns an endpoint.
  double uniform01() {
    return (static_cast<double>(engine_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  // Uniform integer on [0, bound), unbiased via masked rejection.
  std::uint64_t uniform_int(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t mask = ~0ULL >> std::countl_zero(bound - 1);
    for (;;) {
      const std::uint64_t v = engine_() & mask;
      if (v < bound) return v;
    }
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal() { return normal_quantile(uniform01()); }
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  // Marsaglia-Tsang; scale 1.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform01();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / (3.0 * std::sqrt(d));
    for (;;) {
      const double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform01();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double chi_squared(double dof) { return 2.0 * gamma(0.5 * dof); }

  // N(mu, sigma^2) truncated to (lower, +inf). Inverse CDF in the body,
  // Robert's exponential rejection when the untruncated mass is negligible.
  double trunc_normal_left(double mu, double sigma, double lower) {
    const double a = (lower - mu) / sigma;
    if (a < 6.0) {
      const double pa = normal_cdf(a);
      double u = pa + uniform01() * (1.0 - pa);
      u = std::min(u, 1.0 - 1e-16);
      const double z = std::max(normal_quantile(u), a);
      return mu + sigma * z;
    }
    const double alpha = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      const double z = a - std::log(uniform01()) / alpha;
      const double rho = std::exp(-0.5 * (z - alpha) * (z - alpha));
      if (uniform01() <= rho) return mu + sigma * z;
    }
  }

  double trunc_normal_right(double mu, double sigma, double upper) {
    return -trunc_normal_left(-mu, sigma, -upper);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[uniform_int(i)]);
  }

  // k distinct indices from [0, n), returned sorted.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const std::size_t j = static_cast<std::size_t>(i) +
                            static_cast<std::size_t>(uniform_int(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace emm
