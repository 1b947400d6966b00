#include "gensfc/scenario_io.hpp"

#include <fstream>
#include <sstream>

#include "gensfc/error.hpp"
#include "json.hpp"

namespace gensfc::qoe {

using nlohmann::json;

std::string scenario_to_json(const Scenario& s, int indent) {
  json j;
  const ScalingConstants& c = s.network.constants();
  j["constants"] = {{"zeta", c.zeta}, {"eta", c.eta}, {"alpha1", c.alpha1},
                    {"alpha2", c.alpha2}, {"l0", c.l0}};
  json agents = json::array();
  for (const AgentSpec& a : s.network.agents()) {
    agents.push_back({{"service_type", a.service_type},
                      {"compute_budget", a.compute_budget},
                      {"service_rate", a.service_rate},
                      {"service_time_std", a.service_time_std},
                      {"observations", a.observations},
                      {"failures", a.failures}});
  }
  j["agents"] = std::move(agents);
  json links = json::array();
  for (const LinkSpec& l : s.network.links())
    links.push_back({{"a", l.a}, {"b", l.b}, {"mean_ber", l.mean_ber}});
  j["links"] = std::move(links);
  j["arrival_rate"] = s.arrival_rate;
  j["request"] = {{"required_types", s.request.required_types},
                  {"capability_threshold", s.request.capability_threshold},
                  {"max_latency", s.request.max_latency}};
  return j.dump(indent);
}

Scenario scenario_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: invalid JSON: ") + e.what());
  }
  try {
    ScalingConstants c;
    if (j.contains("constants")) {
      const json& jc = j.at("constants");
      c.zeta = jc.value("zeta", c.zeta);
      c.eta = jc.value("eta", c.eta);
      c.alpha1 = jc.value("alpha1", c.alpha1);
      c.alpha2 = jc.value("alpha2", c.alpha2);
      c.l0 = jc.value("l0", c.l0);
    }
    std::vector<AgentSpec> agents;
    int id = 0;
    for (const json& ja : j.at("agents")) {
      AgentSpec a;
      a.id = id++;
      a.service_type = ja.at("service_type").get<int>();
      a.compute_budget = ja.at("compute_budget").get<double>();
      a.service_rate = ja.at("service_rate").get<double>();
      a.service_time_std = ja.at("service_time_std").get<double>();
      a.observations = ja.at("observations").get<std::int64_t>();
      a.failures = ja.at("failures").get<std::int64_t>();
      agents.push_back(a);
    }
    std::vector<LinkSpec> links;
    for (const json& jl : j.at("links"))
      links.push_back({jl.at("a").get<int>(), jl.at("b").get<int>(), jl.at("mean_ber").get<double>()});
    Scenario s;
    s.network = AgenticNetwork(std::move(agents), std::move(links), c);
    s.arrival_rate = j.value("arrival_rate", s.arrival_rate);
    if (j.contains("request")) {
      const json& jr = j.at("request");
      s.request.required_types = jr.value("required_types", s.request.required_types);
      s.request.capability_threshold =
          jr.value("capability_threshold", s.request.capability_threshold);
      s.request.max_latency = jr.value("max_latency", s.request.max_latency);
    }
    if (s.request.required_types.empty()) throw ConfigError("scenario: empty required_types");
    if (!(s.request.capability_threshold > 0.0) || !(s.request.max_latency > 0.0))
      throw ConfigError("scenario: request thresholds must be positive");
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
}

void save_scenario(const Scenario& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << scenario_to_json(s) << '\n';
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return scenario_from_json(buf.str());
}

}  // namespace gensfc::qoe
