#include "gensfc/mg1_sim.hpp"

#include <deque>
#include <queue>
#include <string>
#include <vector>

#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"

namespace gensfc::qoe {

namespace {

enum class EventKind { kArrival, kDeparture };

struct Event {
  double time;
  EventKind kind;
  std::int64_t seq;  // insertion order; breaks time ties deterministically
};

struct Later {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    return a.seq > b.seq;
  }
};

class ServiceSampler {
 public:
  ServiceSampler(double mean, double stddev) : mean_(mean) {
    if (stddev > 0.0) {
      const double cov = stddev / mean;
      shape_ = 1.0 / (cov * cov);
      scale_ = mean / shape_;
    }
  }
  double operator()(Rng& rng) const {
    return shape_ > 0.0 ? rng.gamma(shape_, scale_) : mean_;
  }

 private:
  double mean_;
  double shape_ = 0.0;
  double scale_ = 0.0;
};

}  // namespace

Mg1SimResult simulate_mg1(double arrival_rate, double service_rate, double service_time_std,
                          std::int64_t n_arrivals, std::uint64_t seed) {
  if (!(arrival_rate > 0.0) || !(service_rate > 0.0))
    throw DomainError("simulate_mg1: rates must be positive");
  if (!(service_time_std >= 0.0)) throw DomainError("simulate_mg1: negative service-time std");
  if (n_arrivals < 1) throw SizeError("simulate_mg1: need at least one arrival");
  if (!(arrival_rate / service_rate < 1.0))
    throw StabilityError("simulate_mg1: traffic intensity " +
                         std::to_string(arrival_rate / service_rate) + " is not below 1");

  Rng arrivals_rng(derive_seed(seed, "mg1.arrivals"));
  Rng service_rng(derive_seed(seed, "mg1.service"));
  const ServiceSampler service(1.0 / service_rate, service_time_std);

  const std::int64_t warmup = n_arrivals / 10;
  const std::int64_t total = n_arrivals + warmup;

  std::priority_queue<Event, std::vector<Event>, Later> events;
  std::deque<std::pair<std::int64_t, double>> waiting;  // (customer, arrival time)
  std::int64_t seq = 0;
  std::int64_t generated = 0;
  bool busy = false;
  std::int64_t in_service = -1;
  double in_service_arrival = 0.0;
  double in_service_start = 0.0;

  double sojourn_sum = 0.0;
  double wait_sum = 0.0;
  std::int64_t measured = 0;

  auto start_service = [&](std::int64_t customer, double arrived, double now) {
    busy = true;
    in_service = customer;
    in_service_arrival = arrived;
    in_service_start = now;
    events.push({now + service(service_rng), EventKind::kDeparture, seq++});
  };

  events.push({arrivals_rng.exponential(arrival_rate), EventKind::kArrival, seq++});
  while (!events.empty()) {
    const Event ev = events.top();
    events.pop();
    if (ev.kind == EventKind::kArrival) {
      const std::int64_t customer = generated++;
      if (generated < total)
        events.push({ev.time + arrivals_rng.exponential(arrival_rate), EventKind::kArrival, seq++});
      if (busy) {
        waiting.emplace_back(customer, ev.time);
      } else {
        start_service(customer, ev.time, ev.time);
      }
    } else {
      if (in_service >= warmup) {
        sojourn_sum += ev.time - in_service_arrival;
        wait_sum += in_service_start - in_service_arrival;
        ++measured;
      }
      busy = false;
      if (!waiting.empty()) {
        const auto [customer, arrived] = waiting.front();
        waiting.pop_front();
        start_service(customer, arrived, ev.time);
      }
    }
  }

  Mg1SimResult out;
  out.measured = measured;
  out.warmup = warmup;
  out.mean_sojourn = sojourn_sum / static_cast<double>(measured);
  out.mean_wait = wait_sum / static_cast<double>(measured);
  return out;
}

}  // namespace gensfc::qoe
