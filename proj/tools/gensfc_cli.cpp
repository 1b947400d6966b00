#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gensfc/distill.hpp"
#include "gensfc/error.hpp"
#include "gensfc/harness.hpp"
#include "gensfc/qoe.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gensfc;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kTrainingError = 3;

struct Common {
  std::string config;
  std::uint64_t seed = 1;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON); defaults apply when omitted");
  cmd->add_option("--seed", c.seed, "Master seed");
  cmd->add_option("--out", c.out, "Output directory");
}

harness::ExperimentConfig load_config(const Common& c) {
  return c.config.empty() ? harness::ExperimentConfig{} : harness::load_experiment_config(c.config);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text << '\n';
}

PreferenceVector parse_pref(const std::string& text) {
  std::vector<double> xs;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      xs.push_back(std::stod(item));
    } catch (const std::logic_error&) {
      throw ConfigError("bad preference component '" + item + "'");
    }
  }
  if (xs.size() != 4) throw ConfigError("a preference needs four comma-separated components");
  try {
    return PreferenceVector::from_valid({xs[0], xs[1], xs[2], xs[3]});
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad preference: ") + e.what());
  }
}

json metrics_json(const distill::DistillMetrics& m) {
  return {{"mae", m.mae}, {"mse", m.mse}, {"failure_rate", m.failure_rate}, {"count", m.count}};
}

// Keeps the config's variants that belong to one family.
harness::ExperimentConfig only_variants(harness::ExperimentConfig c, std::initializer_list<const char*> keep) {
  std::vector<std::string> v;
  for (const auto& name : c.variants)
    for (const char* k : keep)
      if (name == k) v.push_back(name);
  if (v.empty()) v.assign(keep.begin(), keep.end());
  c.variants = v;
  return c;
}

struct RunFlags {
  std::string students;
  std::string scenario;
  std::optional<int> episodes;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--students", f.students, "Student cache directory (reused across runs)");
  cmd->add_option("--scenario", f.scenario, "Scenario file replacing the generated one");
  cmd->add_option("--episodes", f.episodes, "Override the configured episode count");
}

harness::Workspace workspace(const harness::ExperimentConfig& c, const Common& common, const RunFlags& f) {
  harness::WorkspaceOptions opt;
  if (!f.students.empty()) opt.student_cache = f.students;
  if (!f.scenario.empty()) opt.scenario = qoe::load_scenario(f.scenario);
  return harness::build_workspace(c, common.seed, opt);
}

int run_experiment_cmd(const Common& common, const RunFlags& f, std::initializer_list<const char*> family) {
  auto c = only_variants(load_config(common), family);
  if (f.episodes) {
    if (*f.episodes < 0) throw ConfigError("--episodes must be >= 0");
    c.episodes = *f.episodes;
  }
  const auto ws = workspace(c, common, f);
  const auto s = harness::run_experiment(ws, c, common.out);
  for (const auto& a : s.aggregates)
    if (a.metric == "reward_episode")
      std::cout << a.variant << " reward_episode " << a.mean << " +- " << a.std << " (" << a.seeds << " seeds)\n";
  return kOk;
}

PreferenceVector run_mean(const fs::path& dir) {
  const json run = json::parse(harness::file_bytes(dir / "run.json"));
  const auto m = run.at("population_mean").get<std::vector<double>>();
  return PreferenceVector::project({m.at(0), m.at(1), m.at(2), m.at(3)});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gensfc: intent-driven agent chaining experiments"};
  app.require_subcommand(1);

  Common common;
  RunFlags run_flags;

  auto* gen_scenario = app.add_subcommand("gen-scenario", "Generate an agentic network scenario");
  add_common(gen_scenario, common);

  auto* gen_intents = app.add_subcommand("gen-intents", "Generate demo/test/train intent datasets per application");
  add_common(gen_intents, common);

  auto* distill_cmd = app.add_subcommand("distill", "Distill the market's student E-LAMs and report test metrics");
  add_common(distill_cmd, common);

  auto* train = app.add_subcommand("train", "Train the learned variants (srl, even)");
  add_common(train, common);
  add_run_flags(train, run_flags);

  auto* baselines = app.add_subcommand("baselines", "Run the heuristic baselines (random, greedy)");
  add_common(baselines, common);
  add_run_flags(baselines, run_flags);

  std::vector<std::string> runs;
  std::string variant = "srl";
  std::uint64_t run_seed = 1;
  int per_app = 100;
  auto* eval = app.add_subcommand(
      "eval", "Decode a trained policy over the test users; with two runs, the policy matching experiment");
  add_common(eval, common);
  eval->add_option("--students", run_flags.students, "Student cache directory");
  eval->add_option("--scenario", run_flags.scenario, "Scenario file replacing the generated one");
  eval->add_option("--run", runs, "Run directory written by train (one, or two for matching)")
      ->required()
      ->expected(1, 2);
  eval->add_option("--variant", variant, "Learned variant whose checkpoint is read");
  eval->add_option("--run-seed", run_seed, "Run seed whose checkpoint is read");
  eval->add_option("--per-app", per_app, "Matching: test users taken from each application");

  std::string pref_text = "0.25,0.25,0.25,0.25";
  std::size_t max_chains = 1000000;
  auto* brute = app.add_subcommand("brute-force", "Exhaustive optimum over chains and E-LAMs");
  add_common(brute, common);
  brute->add_option("--scenario", run_flags.scenario, "Scenario file replacing the generated one");
  brute->add_option("--s", pref_text, "Preference vector c,b,l,p");
  brute->add_option("--max-chains", max_chains, "Abort beyond this many chains");

  int final_window = 0;
  auto* summarize = app.add_subcommand("summarize", "Recompute summary.json from the episode logs in --out");
  add_common(summarize, common);
  summarize->add_option("--final-window", final_window, "Window size (default: from run.json, else 500)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen_scenario) {
      const auto c = load_config(common);
      fs::create_directories(common.out);
      const auto sc = harness::generate_scenario(c.scenario, common.seed);
      save_scenario(sc, fs::path(common.out) / "scenario.json");
      std::cout << "wrote " << (fs::path(common.out) / "scenario.json").string() << " (" << sc.network.size()
                << " agents)\n";
      return kOk;
    }
    if (*gen_intents) {
      const auto c = load_config(common);
      const auto splits = harness::generate_intents(c.intents, c.counts, common.seed);
      harness::save_intents(common.out, splits);
      json j = json::array();
      for (const auto& s : splits)
        j.push_back({{"application_id", s.application_id},
                     {"demo", s.demo.size()},
                     {"test", s.test.size()},
                     {"train", s.train.size()}});
      write_text(fs::path(common.out) / "intents.json", j.dump(1));
      std::cout << "wrote intents for " << splits.size() << " applications\n";
      return kOk;
    }
    if (*distill_cmd) {
      const auto c = load_config(common);
      const fs::path out(common.out);
      fs::create_directories(out / "students");
      const auto splits = harness::generate_intents(c.intents, c.counts, common.seed);
      std::vector<intent::IoKDSample> train_set;
      std::vector<intent::IntentSample> test_set;
      for (const auto& s : splits) {
        train_set.insert(train_set.end(), s.train.begin(), s.train.end());
        test_set.insert(test_set.end(), s.test.begin(), s.test.end());
      }
      json report = {{"master_seed", common.seed},
                     {"even_baseline", metrics_json(distill::even_baseline_metrics(test_set))},
                     {"students", json::array()}};
      for (const auto& spec : c.market.elams) {
        if (spec.kind != "student") continue;
        distill::DistillConfig dc = c.distill;
        dc.profile = spec.profile;
        dc.seed = derive_seed(common.seed, "elam." + spec.name);
        const auto r = distill::train_distill(train_set, dc, test_set);
        const std::string key = harness::student_key(spec, dc, train_set);
        distill::save_student(r.model, out / "students" / (spec.name + "-" + key + ".json"));
        distill::write_training_log(out / (spec.name + "_log.csv"), r.log);
        const double p_min = dc.resolved_p_min(r.model.vocab().size());
        json per_app = json::object();
        for (const auto& s : splits)
          per_app[std::to_string(s.application_id)] = metrics_json(distill::evaluate(r.model, s.test, p_min));
        report["students"].push_back({{"name", spec.name},
                                      {"profile", distill::to_string(spec.profile)},
                                      {"key", key},
                                      {"test", metrics_json(distill::evaluate(r.model, test_set, p_min))},
                                      {"per_application", per_app}});
        std::cout << spec.name << " test mse " << distill::evaluate(r.model, test_set, p_min).mse << '\n';
      }
      write_text(out / "distill.json", report.dump(1));
      return kOk;
    }
    if (*train) return run_experiment_cmd(common, run_flags, {"srl", "even"});
    if (*baselines) return run_experiment_cmd(common, run_flags, {"random", "greedy"});
    if (*eval) {
      const auto v = srl::variant_from_string(variant);
      if (v != srl::Variant::kSRL && v != srl::Variant::kEven) throw ConfigError("eval needs a learned variant");
      const auto c = load_config(common);
      const auto ws = workspace(c, common, run_flags);
      const fs::path out(common.out);
      fs::create_directories(out);
      std::vector<srl::PolicyNet> policies;
      for (const auto& r : runs) policies.push_back(srl::PolicyNet::load(fs::path(r) / harness::policy_name(v, run_seed)));
      if (policies.size() == 1) {
        std::vector<intent::IntentSample> users;
        for (const auto& s : ws.splits) users.insert(users.end(), s.test.begin(), s.test.end());
        const auto rows = harness::evaluate_policy(ws, c, policies[0], users);
        harness::write_eval_log(out / "eval.csv", rows);
        double gt = 0.0, feas = 0.0;
        for (const auto& r : rows) {
          gt += r.summary.reward_gt;
          feas += r.summary.feasible ? 1.0 : 0.0;
        }
        const double n = static_cast<double>(rows.size());
        write_text(out / "eval.json",
                   json{{"users", rows.size()}, {"reward_gt", gt / n}, {"feasible_rate", feas / n}}.dump(1));
        std::cout << "eval reward_gt " << gt / n << " feasible " << feas / n << '\n';
        return kOk;
      }
      if (per_app < 1) throw ConfigError("--per-app must be positive");
      std::vector<intent::IntentSample> users;
      for (const auto& s : ws.splits) {
        if (static_cast<int>(s.test.size()) < per_app) throw ConfigError("not enough test users for --per-app");
        users.insert(users.end(), s.test.begin(), s.test.begin() + per_app);
      }
      srl::Environment env(ws.scenario, ws.profiles, c.env);
      const auto m = srl::policy_match_experiment(policies[0], policies[1], env, users, run_mean(runs[0]),
                                                  run_mean(runs[1]), common.seed);
      harness::write_match_log(out / "match.csv", users, m);
      write_text(out / "match.json", json{{"users", m.users}, {"ties", m.ties}, {"fraction", m.fraction}}.dump(1));
      std::cout << "match fraction " << m.fraction << " (" << m.ties << " ties)\n";
      return kOk;
    }
    if (*brute) {
      const auto c = load_config(common);
      const auto sc = run_flags.scenario.empty() ? harness::generate_scenario(c.scenario, common.seed)
                                                 : qoe::load_scenario(run_flags.scenario);
      std::vector<double> fees;
      for (const auto& e : c.market.elams)
        fees.push_back(e.fee.value_or(e.kind == "student" ? c.market.fee_per_width * distill::hidden_width(e.profile)
                                                           : 0.0));
      const auto r = harness::brute_force_optimum(sc, parse_pref(pref_text), fees, c.env.fail_penalty, max_chains);
      fs::create_directories(common.out);
      write_text(fs::path(common.out) / "brute_force.json",
                 json{{"chain", r.chain}, {"elam_id", r.elam}, {"reward", r.reward}, {"chains", static_cast<std::uint64_t>(r.chains)}}.dump(1));
      std::cout << "optimum reward " << r.reward << " over " << r.chains << " chains\n";
      return kOk;
    }
    if (*summarize) {
      const fs::path dir(common.out);
      std::string echo;
      int window = 500;
      if (fs::exists(dir / "run.json")) {
        const json run = json::parse(harness::file_bytes(dir / "run.json"));
        if (run.contains("config")) {
          echo = run.at("config").dump(1);
          window = run.at("config").value("final_window", window);
        }
      }
      if (final_window > 0) window = final_window;
      const auto s = harness::summarize_dir(dir, window);
      write_text(dir / "summary.json", harness::summary_to_json(s, echo));
      std::cout << "summarized " << s.runs.size() << " runs\n";
      return kOk;
    }
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTrainingError;
  } catch (const StabilityError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kTrainingError;
  } catch (const DomainError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kTrainingError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  return kOk;
}
