#include "gensfc/qoe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gensfc/error.hpp"

namespace gensfc::qoe {

namespace {

std::int64_t pair_key(int a, int b, int n) {
  if (a > b) std::swap(a, b);
  return static_cast<std::int64_t>(a) * n + b;
}

}  // namespace

AgenticNetwork::AgenticNetwork(std::vector<AgentSpec> agents, std::vector<LinkSpec> links,
                               ScalingConstants constants)
    : agents_(std::move(agents)), links_(std::move(links)), constants_(constants) {
  const int n = size();
  for (int i = 0; i < n; ++i) {
    const AgentSpec& a = agents_[i];
    if (a.id != i) throw StructuralError("agent ids must be dense and equal to their index");
    if (a.service_type < 1) throw StructuralError("service_type must be >= 1");
    if (!(a.service_rate > 0.0)) throw DomainError("service_rate must be positive");
    if (!(a.service_time_std >= 0.0)) throw DomainError("service_time_std must be >= 0");
    if (!(a.compute_budget > 0.0)) throw DomainError("compute_budget must be positive");
    if (a.observations < 1) throw DomainError("observations must be >= 1");
    if (a.failures < 0 || a.failures > a.observations)
      throw DomainError("failures must lie in [0, observations]");
  }
  neighbors_.assign(n, {});
  for (std::size_t k = 0; k < links_.size(); ++k) {
    const LinkSpec& l = links_[k];
    if (l.a < 0 || l.b < 0 || l.a >= n || l.b >= n)
      throw StructuralError("link endpoint out of range");
    if (l.a == l.b) throw StructuralError("self-loop links are not allowed");
    if (!(l.mean_ber >= 0.0 && l.mean_ber <= 1.0))
      throw DomainError("mean_ber must lie in [0, 1]");
    auto [it, inserted] = link_index_.emplace(pair_key(l.a, l.b, n), static_cast<int>(k));
    if (!inserted) throw StructuralError("duplicate link between agents " +
                                         std::to_string(l.a) + " and " + std::to_string(l.b));
    neighbors_[l.a].push_back(l.b);
    neighbors_[l.b].push_back(l.a);
  }
  for (auto& nb : neighbors_) std::sort(nb.begin(), nb.end());
}

std::optional<double> AgenticNetwork::link_ber(int a, int b) const {
  const int n = size();
  if (a < 0 || b < 0 || a >= n || b >= n || a == b) return std::nullopt;
  auto it = link_index_.find(pair_key(a, b, n));
  if (it == link_index_.end()) return std::nullopt;
  return links_[it->second].mean_ber;
}

int AgenticNetwork::num_types() const {
  int t = 0;
  for (const auto& a : agents_) t = std::max(t, a.service_type);
  return t;
}

PretrainingOptimum pretraining_loss(double compute_budget, const ScalingConstants& c) {
  if (!(compute_budget > 0.0)) throw DomainError("pretraining_loss: compute budget must be positive");
  if (!(c.zeta > 0.0 && c.eta > 0.0 && c.alpha1 > 0.0 && c.alpha2 > 0.0))
    throw DomainError("pretraining_loss: scaling constants must be positive");
  const double a_sum = c.alpha1 + c.alpha2;
  const double ratio = (c.alpha1 * c.zeta) / (c.alpha2 * c.eta);
  const double flops = compute_budget / 6.0;
  PretrainingOptimum out;
  out.n_opt = std::pow(ratio, 1.0 / a_sum) * std::pow(flops, c.alpha2 / a_sum);
  out.d_opt = std::pow(1.0 / ratio, 1.0 / a_sum) * std::pow(flops, c.alpha1 / a_sum);
  out.loss = c.l0 + c.zeta / std::pow(out.n_opt, c.alpha1) + c.eta / std::pow(out.d_opt, c.alpha2);
  return out;
}

double agent_capability(double loss) {
  if (!(loss >= 0.0)) throw DomainError("agent_capability: loss must be non-negative");
  return std::exp(-loss);
}

double agent_capability(const AgenticNetwork& net, int agent_id) {
  return agent_capability(pretraining_loss(net.agent(agent_id).compute_budget, net.constants()).loss);
}

void validate_chain(const AgenticNetwork& net, const GenSFC& chain) {
  const auto& ids = chain.agent_ids;
  if (ids.empty()) throw StructuralError("chain is empty");
  if (!(chain.arrival_rate >= 0.0)) throw DomainError("chain arrival rate must be non-negative");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= net.size())
      throw StructuralError("chain references unknown agent " + std::to_string(ids[i]));
    for (std::size_t j = 0; j < i; ++j)
      if (ids[j] == ids[i]) throw StructuralError("chain repeats agent " + std::to_string(ids[i]));
    if (i > 0 && !net.adjacent(ids[i - 1], ids[i]))
      throw StructuralError("no link between agents " + std::to_string(ids[i - 1]) + " and " +
                            std::to_string(ids[i]));
  }
}

double combine_capabilities(std::span<const double> agent_capabilities) {
  if (agent_capabilities.empty()) throw StructuralError("chain is empty");
  double prod = 1.0;
  for (double c : agent_capabilities) prod *= c;
  return prod / static_cast<double>(agent_capabilities.size());
}

double combine_ber(std::span<const double> hop_bers) {
  double correct = 1.0;
  for (double b : hop_bers) {
    if (!(b >= 0.0 && b <= 1.0)) throw DomainError("link BER must lie in [0, 1]");
    correct *= 1.0 - b;
  }
  return 1.0 - correct;
}

double chain_capability(const AgenticNetwork& net, const GenSFC& chain) {
  validate_chain(net, chain);
  std::vector<double> caps;
  caps.reserve(chain.agent_ids.size());
  for (int id : chain.agent_ids) caps.push_back(agent_capability(net, id));
  return combine_capabilities(caps);
}

double chain_ber(const AgenticNetwork& net, const GenSFC& chain) {
  validate_chain(net, chain);
  std::vector<double> hops;
  for (std::size_t i = 1; i < chain.agent_ids.size(); ++i)
    hops.push_back(*net.link_ber(chain.agent_ids[i - 1], chain.agent_ids[i]));
  return combine_ber(hops);
}

double traffic_intensity(double arrival_rate, double service_rate) {
  if (!(arrival_rate > 0.0) || !(service_rate > 0.0))
    throw DomainError("traffic_intensity: rates must be positive");
  const double rho = arrival_rate / service_rate;
  if (!(rho < 1.0))
    throw StabilityError("traffic intensity " + std::to_string(rho) + " is not below 1");
  return rho;
}

AgentLatency agent_latency(double arrival_rate, double service_rate, double service_time_std) {
  if (!(service_time_std >= 0.0)) throw DomainError("agent_latency: negative service-time std");
  const double rho = traffic_intensity(arrival_rate, service_rate);
  AgentLatency out;
  out.cov = service_time_std * service_rate;
  out.wait = rho * (1.0 + out.cov * out.cov) / (2.0 * service_rate * (1.0 - rho));
  out.latency = 1.0 / service_rate + out.wait;
  return out;
}

double chain_latency(const AgenticNetwork& net, const GenSFC& chain) {
  validate_chain(net, chain);
  double total = 0.0;
  for (int id : chain.agent_ids) {
    const AgentSpec& a = net.agent(id);
    try {
      total += agent_latency(chain.arrival_rate, a.service_rate, a.service_time_std).latency;
    } catch (const StabilityError& e) {
      throw StabilityError(std::string("agent ") + std::to_string(id) + ": " + e.what(), id);
    }
  }
  return total;
}

double poisson_overload_prob(double arrival_rate, double lambda_max) {
  if (!(arrival_rate >= 0.0)) throw DomainError("poisson_overload_prob: negative arrival rate");
  if (!(lambda_max >= 0.0)) throw DomainError("poisson_overload_prob: negative lambda_max");
  const auto k_max = static_cast<std::int64_t>(std::floor(lambda_max));
  double term = std::exp(-arrival_rate);
  double cdf = term;
  for (std::int64_t k = 1; k <= k_max; ++k) {
    term *= arrival_rate / static_cast<double>(k);
    cdf += term;
    if (term == 0.0 && static_cast<double>(k) > arrival_rate) break;
  }
  return std::clamp(1.0 - cdf, 0.0, 1.0);
}

Outage outage_probability(const AgenticNetwork& net, const GenSFC& chain) {
  validate_chain(net, chain);
  double no_crash = 1.0;
  int bottleneck = -1;
  double best_mu = 0.0;
  for (int id : chain.agent_ids) {
    const AgentSpec& a = net.agent(id);
    if (a.observations <= 0) throw DomainError("outage_probability: zero observations");
    no_crash *= 1.0 - a.crash_rate();
    // Highest rho = lowest service rate; ties go to the lowest id.
    if (bottleneck < 0 || a.service_rate < best_mu ||
        (a.service_rate == best_mu && id < bottleneck)) {
      bottleneck = id;
      best_mu = a.service_rate;
    }
  }
  const double p_over = poisson_overload_prob(chain.arrival_rate, best_mu);
  return {1.0 - no_crash * (1.0 - p_over), bottleneck};
}

double objective_qoe(const QoEBreakdown& b, double c_th) {
  if (!(b.capability > 0.0) || !(c_th > 0.0))
    throw DomainError("objective_qoe: capability and threshold must be positive");
  if (!(b.latency > 0.0)) throw DomainError("objective_qoe: latency must be positive");
  if (b.outage_prob == 1.0) return 0.0;
  return (1.0 - b.outage_prob) *
         ((1.0 - b.ber) * std::log(b.capability / c_th) - std::log(b.latency));
}

double subjective_episode_reward(const QoEBreakdown& b, const Weights& s, double c_th,
                                 double fee) {
  const double cap_arg = s[0] * b.capability / c_th;
  const double lat_arg = s[2] * b.latency;
  if (!(cap_arg > 0.0) || !(c_th > 0.0))
    throw DomainError("subjective reward: capability log argument is not positive");
  if (!(lat_arg > 0.0)) throw DomainError("subjective reward: latency log argument is not positive");
  return (1.0 - s[3] * b.outage_prob) *
             ((1.0 - s[1] * b.ber) * std::log(cap_arg) - std::log(lat_arg)) -
         fee;
}

double subjective_episode_reward(const QoEBreakdown& b, const PreferenceVector& s, double c_th,
                                 double fee) {
  return subjective_episode_reward(b, s.weights(), c_th, fee);
}

bool types_match(const AgenticNetwork& net, const GenSFC& chain,
                 std::span<const int> required_types) {
  if (chain.agent_ids.size() != required_types.size()) return false;
  for (std::size_t i = 0; i < required_types.size(); ++i)
    if (net.agent(chain.agent_ids[i]).service_type != required_types[i]) return false;
  return true;
}

QoEBreakdown evaluate_chain(const AgenticNetwork& net, const GenSFC& chain,
                            const RequestTemplate& tmpl) {
  QoEBreakdown b;
  b.capability = chain_capability(net, chain);
  b.ber = chain_ber(net, chain);
  b.latency = chain_latency(net, chain);
  const Outage o = outage_probability(net, chain);
  b.outage_prob = o.outage;
  b.bottleneck_id = o.bottleneck_id;
  b.feasible.latency = b.latency <= tmpl.max_latency;
  b.feasible.capability = b.capability >= tmpl.capability_threshold;
  b.feasible.succ = types_match(net, chain, tmpl.required_types);
  return b;
}

}  // namespace gensfc::qoe
