#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gensfc/error.hpp"
#include "gensfc/harness.hpp"
#include "gensfc/qoe.hpp"

namespace py = pybind11;
using namespace gensfc;

namespace {

qoe::GenSFC make_chain(const qoe::Scenario& s, const std::vector<int>& ids) {
  return qoe::GenSFC{ids, s.arrival_rate};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core: QoE model, scenario generation, exhaustive optimum and experiment runs";

  auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<StructuralError>(m, "StructuralError", PyExc_ValueError);
  py::register_exception<SizeError>(m, "SizeError", PyExc_ValueError);
  py::register_exception<StabilityError>(m, "StabilityError", PyExc_ArithmeticError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  (void)base;

  m.def("project_preference", [](const Weights& w) { return PreferenceVector::project(w).weights(); }, py::arg("raw"),
        "Projects raw weights onto the floored probability simplex.");
  m.def("angular_distance", [](const Weights& a, const Weights& b) { return angular_distance(a, b); });

  m.def("pretraining_loss", [](double c) {
    const auto r = qoe::pretraining_loss(c);
    return py::dict(py::arg("loss") = r.loss, py::arg("n_opt") = r.n_opt, py::arg("d_opt") = r.d_opt);
  });
  m.def("agent_latency", [](double lam, double mu, double sigma) {
    const auto r = qoe::agent_latency(lam, mu, sigma);
    return py::dict(py::arg("latency") = r.latency, py::arg("wait") = r.wait, py::arg("cov") = r.cov);
  });
  m.def("poisson_overload_prob", &qoe::poisson_overload_prob, py::arg("arrival_rate"), py::arg("lambda_max"));

  m.def(
      "generate_scenario",
      [](const std::string& config_json, std::uint64_t seed) {
        return qoe::scenario_to_json(harness::generate_scenario(harness::scenario_config_from_json(config_json), seed));
      },
      py::arg("config_json") = "{}", py::arg("seed") = 1, "Returns the scenario as JSON text.");

  m.def(
      "evaluate_chain",
      [](const std::string& scenario_json, const std::vector<int>& chain) {
        const auto s = qoe::scenario_from_json(scenario_json);
        const auto b = qoe::evaluate_chain(s.network, make_chain(s, chain), s.request);
        return py::dict(py::arg("capability") = b.capability, py::arg("ber") = b.ber, py::arg("latency") = b.latency,
                        py::arg("outage") = b.outage_prob, py::arg("feasible") = b.feasible.all());
      },
      py::arg("scenario_json"), py::arg("chain"));

  m.def(
      "brute_force_optimum",
      [](const std::string& scenario_json, const Weights& s, const std::vector<double>& fees, double fail_penalty,
         std::size_t max_chains) {
        const auto sc = qoe::scenario_from_json(scenario_json);
        const auto r = harness::brute_force_optimum(sc, PreferenceVector::project(s), fees, fail_penalty, max_chains);
        return py::dict(py::arg("chain") = r.chain, py::arg("elam") = r.elam, py::arg("reward") = r.reward,
                        py::arg("chains") = r.chains);
      },
      py::arg("scenario_json"), py::arg("s"), py::arg("fees"), py::arg("fail_penalty") = 5.0,
      py::arg("max_chains") = 1000000);

  m.def(
      "default_config", [] { return harness::experiment_config_to_json(harness::ExperimentConfig{}); },
      "The default experiment configuration as JSON text.");

  m.def(
      "run_experiment",
      [](const std::string& config_json, std::uint64_t seed, const std::filesystem::path& out,
         const std::filesystem::path& student_cache) {
        const auto c = harness::experiment_config_from_json(config_json);
        py::gil_scoped_release release;
        const auto ws = harness::build_workspace(c, seed, {student_cache, std::nullopt});
        const auto s = harness::run_experiment(ws, c, out);
        return harness::summary_to_json(s, harness::experiment_config_to_json(c));
      },
      py::arg("config_json"), py::arg("seed"), py::arg("out"), py::arg("student_cache") = std::filesystem::path{},
      "Runs every (variant, seed) arm and returns summary.json text.");

  m.def(
      "summarize_dir",
      [](const std::filesystem::path& dir, int final_window) {
        return harness::summary_to_json(harness::summarize_dir(dir, final_window), "{}");
      },
      py::arg("dir"), py::arg("final_window"));
}
