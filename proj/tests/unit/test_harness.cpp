#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "gensfc/error.hpp"
#include "gensfc/harness.hpp"
#include "nlohmann/json.hpp"
#include "test_support.hpp"

using namespace gensfc;
using namespace gensfc::harness;
namespace fs = std::filesystem;

namespace {

const char* kSmoke = R"({
  "variants": ["all"],
  "seeds": [1, 2],
  "episodes": 30,
  "final_window": 10,
  "scenario": {"n_agents": 12, "edge_prob": 0.5},
  "counts": {"demo": 10, "test": 20, "train": 40, "history_per_app": 20, "contrastive_k": 2, "prompt_pool": 80},
  "distill": {"epochs": 2, "warm_start_epochs": 1}
})";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("gensfc_test_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Every type-valid connected chain, scored directly by the environment.
BruteForceResult naive_optimum(const qoe::Scenario& sc, const PreferenceVector& s, const std::vector<double>& fees) {
  srl::Environment env(sc, {{0, "x", 0.0, std::make_shared<srl::ConstantTranslator>(s)}});
  const auto& net = sc.network;
  const auto& req = sc.request.required_types;
  BruteForceResult best;
  best.reward = -1e300;
  std::vector<int> chain;
  auto visit = [&](auto&& self, std::size_t pos) -> void {
    if (pos == req.size()) {
      ++best.chains;
      for (std::size_t e = 0; e < fees.size(); ++e) {
        const double r = env.episode_bonus(chain, s.weights(), fees[e]);
        if (r > best.reward) {
          best.reward = r;
          best.chain = chain;
          best.elam = static_cast<int>(e);
        }
      }
      return;
    }
    for (int a = 0; a < net.size(); ++a) {
      if (net.agent(a).service_type != req[pos]) continue;
      if (std::find(chain.begin(), chain.end(), a) != chain.end()) continue;
      if (!chain.empty() && !net.adjacent(chain.back(), a)) continue;
      chain.push_back(a);
      self(self, pos + 1);
      chain.pop_back();
    }
  };
  visit(visit, 0);
  return best;
}

}  // namespace

TEST_CASE("scenario generation") {
  ScenarioConfig c;
  c.n_agents = 30;
  const auto a = generate_scenario(c, 7);
  const auto b = generate_scenario(c, 7);
  CHECK(qoe::scenario_to_json(a) == qoe::scenario_to_json(b));
  CHECK(qoe::scenario_to_json(a) != qoe::scenario_to_json(generate_scenario(c, 8)));
  CHECK(a.network.size() == 30);
  CHECK(is_connected(a.network));
  int total = 0;
  for (int t = 1; t <= c.n_types; ++t) {
    int n = 0;
    for (const auto& ag : a.network.agents()) n += ag.service_type == t ? 1 : 0;
    CHECK(n > 0);
    total += n;
  }
  CHECK(total == 30);
  for (const auto& ag : a.network.agents()) {
    CHECK(a.arrival_rate / ag.service_rate < 1.0);
    CHECK(ag.compute_budget >= c.budget_min);
    CHECK(ag.compute_budget <= c.budget_max);
    CHECK(ag.crash_rate() <= c.crash_max);
  }
  for (const auto& l : a.network.links()) CHECK(l.mean_ber <= c.ber_max);

  c.topology = "complete";
  c.n_agents = 6;
  const auto k = generate_scenario(c, 1);
  CHECK(k.network.links().size() == 15);

  ScenarioConfig bad;
  bad.n_agents = 40;
  bad.edge_prob = 0.0;
  bad.max_retries = 3;
  CHECK_THROWS_AS(generate_scenario(bad, 1), ConfigError);
}

TEST_CASE("scenario config JSON rejects unknown keys") {
  CHECK(scenario_config_from_json(R"({"n_agents": 20})").n_agents == 20);
  CHECK_THROWS_AS(scenario_config_from_json(R"({"n_agent": 20})"), ConfigError);
  const auto c = scenario_config_from_json(scenario_config_to_json(ScenarioConfig{}));
  CHECK(c.edge_prob == ScenarioConfig{}.edge_prob);
}

TEST_CASE("intent splits") {
  IntentCounts counts;
  counts.demo = 5;
  counts.test = 30;
  counts.train = 60;
  counts.history_per_app = 10;
  counts.contrastive_k = 2;
  counts.prompt_pool = 120;
  const auto cfg = intent::default_intent_config();
  const auto splits = generate_intents(cfg, counts, 3);
  REQUIRE(splits.size() == cfg.applications.size());
  for (const auto& s : splits) {
    CHECK(s.demo.size() == 5);
    CHECK(s.test.size() == 30);
    CHECK(s.train.size() == 60);
    std::set<std::string> test_prompts;
    for (const auto& t : s.test) {
      CHECK(t.prompt.application_id == s.application_id);
      test_prompts.insert(t.prompt.text);
    }
    for (const auto& t : s.train) {
      CHECK(test_prompts.count(t.prompt.text) == 0);
      CHECK(t.contrastive.size() == 2);
    }
  }
  const auto again = generate_intents(cfg, counts, 3);
  CHECK(again[0].train[4].prompt.text == splits[0].train[4].prompt.text);
  CHECK(again[1].test[7].preference == splits[1].test[7].preference);
}

TEST_CASE("served users") {
  IntentCounts counts;
  counts.demo = 2;
  counts.test = 10;
  counts.train = 20;
  counts.history_per_app = 5;
  counts.contrastive_k = 1;
  counts.prompt_pool = 60;
  const auto splits = generate_intents(intent::default_intent_config(), counts, 1);
  const int apps = static_cast<int>(splits.size());
  PopulationConfig p;
  CHECK(static_cast<int>(served_users(splits, p).size()) == 10 * apps);
  p.source = "train";
  CHECK(static_cast<int>(served_users(splits, p).size()) == 20 * apps);
  p.application = 2;
  auto own = served_users(splits, p);
  CHECK(own.size() == 20);
  for (const auto& u : own) CHECK(u.prompt.application_id == 2);
  p.contamination = 0.25;
  p.size = 12;
  const auto mixed = served_users(splits, p);
  CHECK(mixed.size() == 12);
  const auto others = std::count_if(mixed.begin(), mixed.end(), [](const auto& u) { return u.prompt.application_id != 2; });
  CHECK(others == 3);
}

TEST_CASE("experiment config validation") {
  CHECK_NOTHROW(experiment_config_from_json("{}"));
  CHECK_THROWS_AS(experiment_config_from_json(R"({"episode": 3})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"episodes": -1})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"variants": ["magic"]})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"population": {"source": "demo"}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"population": {"application": 1, "contamination": 1.0}})"),
                  ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"population": {"contamination": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(R"({"population": {"application": 99}})"), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json("not json"), ConfigError);
  const auto c = experiment_config_from_json(kSmoke);
  CHECK(c.variants.size() == 4);
  const auto echo = experiment_config_from_json(experiment_config_to_json(c));
  CHECK(experiment_config_to_json(echo) == experiment_config_to_json(c));
}

TEST_CASE("brute force optimum") {
  using gensfc::testing::make_agent;
  std::vector<qoe::AgentSpec> ag;
  for (int i = 0; i < 9; ++i) ag.push_back(make_agent(i, 1 + i % 3, 2.0 + 0.5 * i, 0.1, 1e20 * std::pow(2.5, i), 100, i % 3));
  std::vector<qoe::LinkSpec> links;
  for (int i = 0; i < 9; ++i)
    for (int j = i + 1; j < 9; ++j)
      if ((i * 7 + j * 3) % 4 != 0) links.push_back({i, j, 0.002 * ((i + j) % 5)});
  qoe::Scenario sc;
  sc.network = qoe::AgenticNetwork(ag, links);
  sc.arrival_rate = 0.5;
  const std::vector<double> fees{0.05, 0.0, 0.2};
  for (const auto& s : {PreferenceVector::even(), PreferenceVector::project({0.7, 0.1, 0.1, 0.1}),
                        PreferenceVector::project({0.05, 0.05, 0.8, 0.1})}) {
    const auto bf = brute_force_optimum(sc, s, fees);
    const auto naive = naive_optimum(sc, s, fees);
    CHECK(bf.reward == doctest::Approx(naive.reward).epsilon(1e-12));
    CHECK(bf.chain == naive.chain);
    CHECK(bf.elam == naive.elam);
    CHECK(bf.chains == naive.chains);
    CHECK(bf.elam == 1);  // the free E-LAM always wins
  }
  CHECK_THROWS_AS(brute_force_optimum(sc, PreferenceVector::even(), fees, 5.0, 3), SizeError);

  SUBCASE("a single feasible chain") {
    auto line = gensfc::testing::make_path(
        {make_agent(0, 1, 3.0), make_agent(1, 2, 3.0), make_agent(2, 3, 3.0)}, {0.001, 0.001});
    qoe::Scenario one{line, 0.5, {}};
    const auto r = brute_force_optimum(one, PreferenceVector::even(), std::vector<double>{0.0});
    CHECK(r.chain == std::vector<int>{0, 1, 2});
    CHECK(r.chains == 1);
  }
  SUBCASE("a dominated agent does not change the optimum") {
    const auto s = PreferenceVector::project({0.4, 0.2, 0.2, 0.2});
    const auto before = brute_force_optimum(sc, s, fees);
    auto more = ag;
    more.push_back(make_agent(9, 1, 1.0, 0.9, 1e19, 100, 50));
    auto more_links = links;
    for (int j = 0; j < 9; ++j) more_links.push_back({9, j, 0.05});
    qoe::Scenario dom{qoe::AgenticNetwork(more, more_links), 0.5, {}};
    const auto after = brute_force_optimum(dom, s, fees);
    CHECK(after.chain == before.chain);
    CHECK(after.reward == doctest::Approx(before.reward).epsilon(1e-12));
  }
  SUBCASE("no policy beats the optimum") {
    std::vector<srl::ElamProfile> elams;
    for (std::size_t e = 0; e < fees.size(); ++e)
      elams.push_back({static_cast<int>(e), "c", fees[e],
                       std::make_shared<srl::ConstantTranslator>(PreferenceVector::project({0.3, 0.3, 0.2, 0.2}))});
    srl::Environment env(sc, elams);
    const auto opt = brute_force_optimum(sc, PreferenceVector::project({0.3, 0.3, 0.2, 0.2}), fees);
    srl::RunOptions o;
    o.episodes = 300;
    srl::IntentSample u;
    u.prompt.text = "p";
    const auto rows = srl::run_random(env, std::vector<srl::IntentSample>{u}, o);
    for (const auto& r : rows) CHECK(r.summary.reward_episode <= opt.reward + 1e-12);
  }
}

TEST_CASE("window statistics and aggregates") {
  std::vector<srl::EpisodeRow> rows(10);
  for (int i = 0; i < 10; ++i) {
    rows[i].episode = i;
    rows[i].summary.reward_episode = i;
    rows[i].summary.reward_gt = 2.0 * i;
    rows[i].summary.feasible = i % 2 == 0;
  }
  const auto w = window_stats(rows, 4);
  CHECK(w.window == 4);
  CHECK(w.reward_episode == doctest::Approx(7.5).epsilon(1e-12));
  CHECK(w.reward_gt == doctest::Approx(15.0).epsilon(1e-12));
  CHECK(w.feasible_rate == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(window_stats(rows, 100).window == 10);
  const auto empty = window_stats(std::span<const srl::EpisodeRow>{}, 5);
  CHECK(empty.window == 0);

  VariantStats a = w, b = w;
  a.variant = b.variant = "srl";
  b.seed = 2;
  b.reward_episode = 9.5;
  const auto agg = aggregate(std::vector<VariantStats>{a, b});
  bool seen = false;
  for (const auto& g : agg)
    if (g.metric == "reward_episode") {
      seen = true;
      CHECK(g.seeds == 2);
      CHECK(g.mean == doctest::Approx(8.5).epsilon(1e-12));
      CHECK(g.std == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    }
  CHECK(seen);
  for (const auto& g : aggregate(std::vector<VariantStats>{a})) CHECK(g.std == 0.0);
}

TEST_CASE("experiment runs, summaries and the student cache") {
  auto c = experiment_config_from_json(kSmoke);
  const auto cache = scratch("cache");
  const auto ws = build_workspace(c, 4, {cache, std::nullopt});
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(cache)) files += e.is_regular_file() ? 1 : 0;
  CHECK(files == 2);  // the two students
  const auto again = build_workspace(c, 4, {cache, std::nullopt});
  const auto fresh = build_workspace(c, 4);
  std::size_t files_after = 0;
  for (const auto& e : fs::directory_iterator(cache)) files_after += e.is_regular_file() ? 1 : 0;
  CHECK(files_after == files);
  for (std::size_t i = 0; i < ws.profiles.size(); ++i) {
    const auto& p = ws.users[3].prompt;
    CHECK(again.profiles[i].translator->translate(p) == fresh.profiles[i].translator->translate(p));
    CHECK(again.profiles[i].fee == fresh.profiles[i].fee);
  }
  CHECK(ws.users.size() == 20 * ws.splits.size());

  const auto out = scratch("run");
  const auto summary = run_experiment(ws, c, out);
  CHECK(summary.runs.size() == 4 * 2);
  std::set<std::pair<std::string, std::uint64_t>> arms;
  for (const auto& r : summary.runs) {
    arms.insert({r.variant, r.seed});
    CHECK(r.rows == 30);
    CHECK(r.window == 10);
    CHECK(fs::exists(out / (r.variant + "_seed" + std::to_string(r.seed) + ".csv")));
  }
  CHECK(arms.size() == 8);
  CHECK(fs::exists(out / "srl_seed1.policy.json"));
  CHECK(fs::exists(out / "even_seed2.policy.json"));
  CHECK_FALSE(fs::exists(out / "greedy_seed1.policy.json"));

  const auto re = summarize_dir(out, 10);
  CHECK(re.input_hash == summary.input_hash);
  CHECK(re.logs_hash == summary.logs_hash);
  REQUIRE(re.runs.size() == summary.runs.size());
  for (std::size_t i = 0; i < re.runs.size(); ++i) {
    const auto& x = re.runs[i];
    const auto it = std::find_if(summary.runs.begin(), summary.runs.end(),
                                 [&](const auto& r) { return r.variant == x.variant && r.seed == x.seed; });
    REQUIRE(it != summary.runs.end());
    CHECK(std::abs(x.reward_episode - it->reward_episode) <= 1e-12);
    CHECK(std::abs(x.reward_gt - it->reward_gt) <= 1e-12);
    CHECK(std::abs(x.capability - it->capability) <= 1e-12);
  }
  const auto j = nlohmann::json::parse(file_bytes(out / "summary.json"));
  CHECK(j.at("input_hash").get<std::string>() == summary.input_hash);
  CHECK(j.at("runs").size() == 8);
  const auto run = nlohmann::json::parse(file_bytes(out / "run.json"));
  CHECK(run.at("master_seed").get<std::uint64_t>() == 4);

  SUBCASE("zero episodes give empty logs and a valid summary") {
    auto z = c;
    z.episodes = 0;
    z.variants = {"srl", "greedy"};
    z.seeds = {1};
    const auto dir = scratch("zero");
    const auto s = run_experiment(ws, z, dir);
    REQUIRE(s.runs.size() == 2);
    for (const auto& r : s.runs) {
      CHECK(r.rows == 0);
      CHECK(r.window == 0);
    }
    CHECK(read_episode_log(dir / "srl_seed1.csv").empty());
    const auto back = summarize_dir(dir, 10);
    CHECK(back.runs.size() == 2);
    CHECK_NOTHROW(nlohmann::json::parse(file_bytes(dir / "summary.json")));
    fs::remove_all(dir);
  }
  SUBCASE("greedy evaluation of a trained policy") {
    const auto arm = run_arm(ws, c, srl::Variant::kSRL, 1);
    REQUIRE(arm.policy.has_value());
    const std::vector<intent::IntentSample> users(ws.users.begin(), ws.users.begin() + 5);
    const auto e1 = evaluate_policy(ws, c, *arm.policy, users);
    const auto e2 = evaluate_policy(ws, c, *arm.policy, users);
    REQUIRE(e1.size() == 5);
    for (std::size_t i = 0; i < e1.size(); ++i) {
      CHECK(e1[i].summary.chain == e2[i].summary.chain);
      CHECK(e1[i].summary.reward_episode == e2[i].summary.reward_episode);
      CHECK(e1[i].user == static_cast<int>(i));
    }
  }
  fs::remove_all(out);
  fs::remove_all(cache);
}

TEST_CASE("content hash is stable and order sensitive") {
  const std::vector<std::string> ab{"a", "b"}, ba{"b", "a"};
  CHECK(content_hash(ab) == content_hash(ab));
  CHECK(content_hash(ab) != content_hash(ba));
  CHECK(content_hash(ab).size() == 16);
}
