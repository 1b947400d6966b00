#pragma once

#include <cstdint>

namespace gensfc::qoe {

struct Mg1SimResult {
  double mean_sojourn = 0.0;  // waiting + service, averaged over measured arrivals
  double mean_wait = 0.0;
  std::int64_t measured = 0;
  std::int64_t warmup = 0;
};

// Event-driven single-server FIFO simulation with Poisson arrivals and
// gamma-distributed service times matched to mean 1/service_rate and standard
// deviation service_time_std (deterministic when the std is zero). The first
// n_arrivals/10 customers are simulated but not measured so the estimate is
// not biased by the empty initial queue. Verification oracle only.
Mg1SimResult simulate_mg1(double arrival_rate, double service_rate, double service_time_std,
                          std::int64_t n_arrivals, std::uint64_t seed);

inline double mg1_des_oracle(double arrival_rate, double service_rate, double service_time_std,
                             std::int64_t n_arrivals, std::uint64_t seed) {
  return simulate_mg1(arrival_rate, service_rate, service_time_std, n_arrivals, seed).mean_sojourn;
}

}  // namespace gensfc::qoe
