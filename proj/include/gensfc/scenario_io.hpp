#pragma once

#include <filesystem>
#include <string>

#include "gensfc/qoe.hpp"

namespace gensfc::qoe {

// Everything an experiment needs about the network side: the graph, the
// request arrival rate and the request template.
struct Scenario {
  AgenticNetwork network;
  double arrival_rate = 0.8;
  RequestTemplate request;
};

// JSON text with top-level keys `agents`, `links`, `constants`,
// `arrival_rate`, `request`. See docs/scenario.schema.json.
std::string scenario_to_json(const Scenario& s, int indent = 1);
Scenario scenario_from_json(const std::string& text);

void save_scenario(const Scenario& s, const std::filesystem::path& path);
Scenario load_scenario(const std::filesystem::path& path);

}  // namespace gensfc::qoe
