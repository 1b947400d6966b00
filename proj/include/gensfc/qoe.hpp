#pragma once

// Agentic-network data model and the closed-form QoE mathematics: scaling-law
// capability, chain bit error rate, M/G/1 latency, outage probability and the
// objective/subjective QoE functions.

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "gensfc/preference.hpp"

namespace gensfc::qoe {

// Scaling-law constants. Defaults are the published empirical fit.
struct ScalingConstants {
  double zeta = 406.4;
  double eta = 410.7;
  double alpha1 = 0.34;
  double alpha2 = 0.28;
  double l0 = 0.0;
};

struct AgentSpec {
  int id = 0;
  int service_type = 1;         // 1-based
  double compute_budget = 1e21; // training FLOPs
  double service_rate = 1.0;    // requests / s
  double service_time_std = 0.0;
  std::int64_t observations = 1;
  std::int64_t failures = 0;

  double crash_rate() const {
    return static_cast<double>(failures) / static_cast<double>(observations);
  }
};

struct LinkSpec {
  int a = 0;
  int b = 0;
  double mean_ber = 0.0;
};

// Undirected agent graph. Validates its invariants on construction and keeps
// an adjacency index for O(1) link lookup.
class AgenticNetwork {
 public:
  AgenticNetwork() = default;
  AgenticNetwork(std::vector<AgentSpec> agents, std::vector<LinkSpec> links,
                 ScalingConstants constants = {});

  int size() const { return static_cast<int>(agents_.size()); }
  const std::vector<AgentSpec>& agents() const { return agents_; }
  const AgentSpec& agent(int id) const { return agents_.at(id); }
  const std::vector<LinkSpec>& links() const { return links_; }
  const ScalingConstants& constants() const { return constants_; }
  const std::vector<int>& neighbors(int id) const { return neighbors_.at(id); }

  // Mean BER of the link between a and b, or nullopt when not adjacent.
  std::optional<double> link_ber(int a, int b) const;
  bool adjacent(int a, int b) const { return link_ber(a, b).has_value(); }
  int num_types() const;

 private:
  std::vector<AgentSpec> agents_;
  std::vector<LinkSpec> links_;
  ScalingConstants constants_;
  std::vector<std::vector<int>> neighbors_;
  std::unordered_map<std::int64_t, int> link_index_;
};

struct GenSFC {
  std::vector<int> agent_ids;
  double arrival_rate = 1.0;
};

struct Feasibility {
  bool latency = false;     // L <= L_max
  bool capability = false;  // C >= C_th
  bool succ = false;        // member types match the required sequence
  bool all() const { return latency && capability && succ; }
};

struct QoEBreakdown {
  double capability = 0.0;
  double ber = 0.0;
  double latency = 0.0;
  double outage_prob = 0.0;
  int bottleneck_id = -1;
  Feasibility feasible;
};

struct RequestTemplate {
  std::vector<int> required_types{1, 2, 3};
  double capability_threshold = 0.01;
  double max_latency = 10.0;
};

struct PretrainingOptimum {
  double loss = 0.0;
  double n_opt = 0.0;  // compute-optimal parameter count
  double d_opt = 0.0;  // compute-optimal token count
};

PretrainingOptimum pretraining_loss(double compute_budget, const ScalingConstants& c = {});
double agent_capability(double loss);
// exp(-loss) of one agent, using the network's constants.
double agent_capability(const AgenticNetwork& net, int agent_id);

// Throws StructuralError if the chain is empty, repeats an agent, references an
// unknown agent or hops across a missing link; DomainError on a bad arrival rate.
void validate_chain(const AgenticNetwork& net, const GenSFC& chain);

// (1/n) * prod(capabilities). The 1/n prefactor is applied literally.
double combine_capabilities(std::span<const double> agent_capabilities);
// 1 - prod(1 - ber) over the n-1 hops; 0 for a single agent.
double combine_ber(std::span<const double> hop_bers);

double chain_capability(const AgenticNetwork& net, const GenSFC& chain);
double chain_ber(const AgenticNetwork& net, const GenSFC& chain);

double traffic_intensity(double arrival_rate, double service_rate);

struct AgentLatency {
  double latency = 0.0;  // service + queueing
  double wait = 0.0;     // queueing only
  double cov = 0.0;      // coefficient of variation of the service time
};
AgentLatency agent_latency(double arrival_rate, double service_rate, double service_time_std);
double chain_latency(const AgenticNetwork& net, const GenSFC& chain);

// P(R > floor(lambda_max)) for R ~ Poisson(arrival_rate).
double poisson_overload_prob(double arrival_rate, double lambda_max);

struct Outage {
  double outage = 0.0;
  int bottleneck_id = -1;
};
Outage outage_probability(const AgenticNetwork& net, const GenSFC& chain);

double objective_qoe(const QoEBreakdown& b, double c_th);
double subjective_episode_reward(const QoEBreakdown& b, const PreferenceVector& s,
                                 double c_th, double fee);
// Same formula on raw weights; used where the weights are not floored
// (axis-vector edge cases).
double subjective_episode_reward(const QoEBreakdown& b, const Weights& s, double c_th,
                                 double fee);

bool types_match(const AgenticNetwork& net, const GenSFC& chain,
                 std::span<const int> required_types);

QoEBreakdown evaluate_chain(const AgenticNetwork& net, const GenSFC& chain,
                            const RequestTemplate& tmpl);

}  // namespace gensfc::qoe
