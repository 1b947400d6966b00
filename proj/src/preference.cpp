#include "gensfc/preference.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "gensfc/error.hpp"

namespace gensfc {

PreferenceVector PreferenceVector::project(const Weights& raw) {
  Weights excess{};
  double mass = 0.0;
  for (std::size_t i = 0; i < kPrefDim; ++i) {
    if (!std::isfinite(raw[i])) throw DomainError("preference weight is not finite");
    excess[i] = std::max(raw[i] - kOmegaMin, 0.0);
    mass += excess[i];
  }
  const double free_mass = 1.0 - kPrefDim * kOmegaMin;
  Weights out{};
  for (std::size_t i = 0; i < kPrefDim; ++i) {
    const double share = mass > 0.0 ? excess[i] / mass : 1.0 / kPrefDim;
    out[i] = kOmegaMin + free_mass * share;
  }
  return PreferenceVector(out);
}

PreferenceVector PreferenceVector::from_valid(const Weights& w) {
  if (!is_valid_preference(w)) throw DomainError("not a valid preference vector");
  return PreferenceVector(w);
}

PreferenceVector PreferenceVector::even() { return PreferenceVector({0.25, 0.25, 0.25, 0.25}); }

bool is_valid_preference(const Weights& w, double tol) {
  double sum = 0.0;
  for (double x : w) {
    if (!std::isfinite(x) || x < kOmegaMin - tol) return false;
    sum += x;
  }
  return std::abs(sum - 1.0) <= tol;
}

double cosine4(const Weights& a, const Weights& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < kPrefDim; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double angular_distance(const Weights& a, const Weights& b) {
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < kPrefDim; ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.5;
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  // 2*atan2(|u - v|, |u + v|) equals arccos(u . v) for unit u, v but stays
  // accurate for nearly parallel inputs, where arccos loses half the digits.
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < kPrefDim; ++i) {
    const double u = a[i] / na, v = b[i] / nb;
    diff += (u - v) * (u - v);
    sum += (u + v) * (u + v);
  }
  const double angle = 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
  return std::clamp(angle / std::numbers::pi, 0.0, 1.0);
}

std::string to_string(const PreferenceVector& s) {
  std::ostringstream os;
  os.precision(4);
  os << '[' << s[0] << ", " << s[1] << ", " << s[2] << ", " << s[3] << ']';
  return os.str();
}

}  // namespace gensfc
