#pragma once

#include <array>
#include <span>
#include <string>

namespace gensfc {

inline constexpr std::size_t kPrefDim = 4;
// Lower bound on every preference weight; keeps the logarithms of the
// subjective reward finite.
inline constexpr double kOmegaMin = 1e-3;

// Raw (not necessarily normalised) weights over capability, information loss,
// latency and outage, in that order.
using Weights = std::array<double, kPrefDim>;

enum class Factor : int { kCapability = 0, kBer = 1, kLatency = 2, kOutage = 3 };

// A point on the probability simplex with every coordinate >= kOmegaMin.
// Only constructible through validation or projection.
class PreferenceVector {
 public:
  // Subtract the floor, clip at zero, renormalise to the remaining mass and
  // add the floor back. Idempotent on valid vectors. An all-zero remainder
  // maps to the even vector.
  static PreferenceVector project(const Weights& raw);
  // Throws DomainError unless `w` already satisfies the simplex invariant.
  static PreferenceVector from_valid(const Weights& w);
  static PreferenceVector even();

  const Weights& weights() const noexcept { return w_; }
  double operator[](std::size_t i) const { return w_[i]; }
  double weight(Factor f) const { return w_[static_cast<int>(f)]; }

  friend bool operator==(const PreferenceVector&, const PreferenceVector&) = default;

 private:
  explicit PreferenceVector(const Weights& w) : w_(w) {}
  Weights w_{};
};

bool is_valid_preference(const Weights& w, double tol = 1e-9);

double cosine4(const Weights& a, const Weights& b);

// arccos(cosine) / pi with the cosine clamped to [-1, 1]. Non-negative inputs
// give a value in [0, 0.5]. Either argument all-zero gives 0.5 by convention.
double angular_distance(const Weights& a, const Weights& b);
inline double angular_distance(const PreferenceVector& a, const PreferenceVector& b) {
  return angular_distance(a.weights(), b.weights());
}

std::string to_string(const PreferenceVector& s);

}  // namespace gensfc
