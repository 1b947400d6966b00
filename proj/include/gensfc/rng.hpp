#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace gensfc {

// 64-bit FNV-1a. Used for feature hashing and seed derivation, so its output
// must never change.
constexpr std::uint64_t fnv1a64(std::string_view text,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Sub-seed for a named stream: splitmix64(master ^ fnv1a64(label)).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  return splitmix64(master ^ fnv1a64(label));
}

// Seeded random source. Engine is std::mt19937_64 (bit-exact by the standard);
// the distributions are implemented here because the standard library ones
// are implementation-defined and would break cross-platform reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform in (0, 1], safe for log().
  double uniform_open() { return 1.0 - uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);
  int index(std::size_t n) { return static_cast<int>(below(n)); }

  double normal();
  double exponential(double rate);
  // Marsaglia-Tsang; shape > 0, scale > 0.
  double gamma(double shape, double scale = 1.0);
  // Sample from a Dirichlet with the given concentrations.
  std::vector<double> dirichlet(std::span<const double> alpha);
  bool bernoulli(double p) { return uniform() < p; }

  // Index drawn with probability proportional to weights (non-negative).
  int categorical(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gensfc
