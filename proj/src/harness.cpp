#include "gensfc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"
#include "json.hpp"

namespace gensfc::harness {

using nlohmann::json;

namespace {

// Rejects keys outside `allowed` so typos surface as config errors.
void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// ---------------------------------------------------------------------------

namespace {

ScenarioConfig scenario_config_from(const json& j) {
  ScenarioConfig c;
  check_keys(j,
             {"n_agents", "n_types", "required_types", "topology", "edge_prob", "max_retries", "budget_min",
              "budget_max", "mu_min", "mu_max", "sigma_factor", "coupling", "crash_max", "ber_max", "observations",
              "arrival_rate", "capability_threshold", "max_latency"},
             "scenario");
  read(j, "n_agents", c.n_agents);
  read(j, "n_types", c.n_types);
  read(j, "required_types", c.required_types);
  read(j, "topology", c.topology);
  read(j, "edge_prob", c.edge_prob);
  read(j, "max_retries", c.max_retries);
  read(j, "budget_min", c.budget_min);
  read(j, "budget_max", c.budget_max);
  read(j, "mu_min", c.mu_min);
  read(j, "mu_max", c.mu_max);
  read(j, "sigma_factor", c.sigma_factor);
  read(j, "coupling", c.coupling);
  read(j, "crash_max", c.crash_max);
  read(j, "ber_max", c.ber_max);
  read(j, "observations", c.observations);
  read(j, "arrival_rate", c.arrival_rate);
  read(j, "capability_threshold", c.capability_threshold);
  read(j, "max_latency", c.max_latency);
  const auto bad = [](const std::string& m) { throw ConfigError("scenario: " + m); };
  if (c.n_agents < 1) bad("n_agents must be positive");
  if (c.n_types < 1) bad("n_types must be positive");
  if (c.required_types.empty()) bad("required_types must be non-empty");
  for (int t : c.required_types)
    if (t < 1 || t > c.n_types) bad("required type out of range");
  if (c.topology != "er" && c.topology != "complete") bad("topology must be 'er' or 'complete'");
  if (!(c.edge_prob > 0.0 && c.edge_prob <= 1.0)) bad("edge_prob must be in (0, 1]");
  if (c.max_retries < 1) bad("max_retries must be positive");
  if (!(c.budget_min > 0.0 && c.budget_max >= c.budget_min)) bad("bad compute budget range");
  if (!(c.mu_min > 0.0 && c.mu_max >= c.mu_min)) bad("bad service rate range");
  if (!(c.arrival_rate >= 0.0 && c.arrival_rate < c.mu_min)) bad("arrival_rate must be below mu_min");
  if (!(c.sigma_factor >= 0.0)) bad("sigma_factor must be >= 0");
  if (!(c.coupling >= 0.0 && c.coupling <= 1.0)) bad("coupling must be in [0, 1]");
  if (!(c.crash_max >= 0.0 && c.crash_max <= 1.0)) bad("crash_max must be in [0, 1]");
  if (!(c.ber_max >= 0.0 && c.ber_max <= 1.0)) bad("ber_max must be in [0, 1]");
  if (c.observations < 1) bad("observations must be positive");
  if (!(c.capability_threshold > 0.0)) bad("capability_threshold must be positive");
  if (!(c.max_latency > 0.0)) bad("max_latency must be positive");
  std::map<int, int> need;
  for (int t : c.required_types) ++need[t];
  for (const auto& [t, k] : need)
    if (c.n_agents / c.n_types < k) bad("too few agents per type for the required chain");
  return c;
}

json scenario_config_json(const ScenarioConfig& c) {
  return {{"n_agents", c.n_agents},
          {"n_types", c.n_types},
          {"required_types", c.required_types},
          {"topology", c.topology},
          {"edge_prob", c.edge_prob},
          {"max_retries", c.max_retries},
          {"budget_min", c.budget_min},
          {"budget_max", c.budget_max},
          {"mu_min", c.mu_min},
          {"mu_max", c.mu_max},
          {"sigma_factor", c.sigma_factor},
          {"coupling", c.coupling},
          {"crash_max", c.crash_max},
          {"ber_max", c.ber_max},
          {"observations", c.observations},
          {"arrival_rate", c.arrival_rate},
          {"capability_threshold", c.capability_threshold},
          {"max_latency", c.max_latency}};
}

json parse_json(std::string_view text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

ScenarioConfig scenario_config_from_json(std::string_view text) {
  try {
    return scenario_config_from(parse_json(text, "scenario"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
}

std::string scenario_config_to_json(const ScenarioConfig& c) { return scenario_config_json(c).dump(1); }

bool is_connected(const qoe::AgenticNetwork& net) {
  if (net.size() == 0) return true;
  std::vector<char> seen(static_cast<std::size_t>(net.size()), 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    const int u = stack.back();
    stack.pop_back();
    for (int v : net.neighbors(u))
      if (!seen[static_cast<std::size_t>(v)]) {
        seen[static_cast<std::size_t>(v)] = 1;
        ++count;
        stack.push_back(v);
      }
  }
  return count == net.size();
}

qoe::Scenario generate_scenario(const ScenarioConfig& c, std::uint64_t seed) {
  Rng attr(derive_seed(seed, "scenario.agents"));
  Rng topo(derive_seed(seed, "scenario.topology"));
  std::vector<int> types(static_cast<std::size_t>(c.n_agents));
  for (int i = 0; i < c.n_agents; ++i) types[static_cast<std::size_t>(i)] = 1 + i % c.n_types;
  attr.shuffle(types);
  std::vector<qoe::AgentSpec> agents;
  const double lb0 = std::log(c.budget_min), lb1 = std::log(c.budget_max);
  for (int i = 0; i < c.n_agents; ++i) {
    qoe::AgentSpec a;
    a.id = i;
    a.service_type = types[static_cast<std::size_t>(i)];
    const double lb = attr.uniform(lb0, lb1);
    a.compute_budget = std::exp(lb);
    const double q = lb1 > lb0 ? (lb - lb0) / (lb1 - lb0) : 0.0;
    const double coupled = c.mu_max - (c.mu_max - c.mu_min) * q;
    a.service_rate = (1.0 - c.coupling) * attr.uniform(c.mu_min, c.mu_max) + c.coupling * coupled;
    a.service_time_std = attr.uniform(0.0, c.sigma_factor / a.service_rate);
    a.observations = c.observations;
    a.failures = std::llround(attr.uniform(0.0, c.crash_max) * static_cast<double>(c.observations));
    agents.push_back(a);
  }
  for (int attempt = 0; attempt < c.max_retries; ++attempt) {
    std::vector<qoe::LinkSpec> links;
    for (int a = 0; a < c.n_agents; ++a)
      for (int b = a + 1; b < c.n_agents; ++b)
        if (c.topology == "complete" || topo.bernoulli(c.edge_prob))
          links.push_back({a, b, topo.uniform(0.0, c.ber_max)});
    qoe::AgenticNetwork net(agents, std::move(links));
    if (!is_connected(net)) continue;
    qoe::Scenario sc;
    sc.network = std::move(net);
    sc.arrival_rate = c.arrival_rate;
    sc.request.required_types = c.required_types;
    sc.request.capability_threshold = c.capability_threshold;
    sc.request.max_latency = c.max_latency;
    return sc;
  }
  throw ConfigError("no connected topology after " + std::to_string(c.max_retries) + " attempts");
}

// ---------------------------------------------------------------------------

std::vector<AppSplit> generate_intents(const intent::IntentConfig& config, const IntentCounts& counts,
                                       std::uint64_t seed) {
  using namespace intent;
  if (counts.demo < 1 || counts.test < 0 || counts.train < 0 || counts.history_per_app < 0 ||
      counts.contrastive_k < 1 || counts.prompt_pool < counts.demo + counts.test)
    throw ConfigError("bad intent counts");
  IntentConfig clean_cfg = config;
  clean_cfg.outlier_rate = 0.0;
  const TeacherOracle oracle(config, derive_seed(seed, "teacher"));
  const TeacherOracle clean(clean_cfg, derive_seed(seed, "teacher"));
  std::vector<Prompt> hist_prompts;
  for (const auto& app : config.applications) {
    auto v = generate_prompts(config, app.id, counts.history_per_app, derive_seed(seed, "hist"));
    hist_prompts.insert(hist_prompts.end(), v.begin(), v.end());
  }
  const auto hist = label_prompts(hist_prompts, oracle);
  std::vector<AppSplit> out;
  for (const auto& app : config.applications) {
    const auto pool = generate_prompts(config, app.id, counts.prompt_pool, derive_seed(seed, "users"));
    std::vector<Prompt> demo_p, test_p;
    std::set<std::string> seen;
    for (const auto& p : pool) {
      if (!seen.insert(p.text).second) continue;
      if (static_cast<int>(demo_p.size()) < counts.demo)
        demo_p.push_back(p);
      else if (static_cast<int>(test_p.size()) < counts.test)
        test_p.push_back(p);
    }
    if (static_cast<int>(demo_p.size()) < counts.demo || static_cast<int>(test_p.size()) < counts.test)
      throw ConfigError("prompt pool too small for the requested demo/test counts");
    AppSplit split;
    split.application_id = app.id;
    split.demo = label_prompts(demo_p, oracle);
    split.test = label_prompts(test_p, clean);
    std::set<std::string> test_text;
    for (const auto& p : test_p) test_text.insert(p.text);
    const auto ds = build_iokd_dataset(split.demo, hist, counts.train * 2, counts.contrastive_k, oracle,
                                       derive_seed(seed, "aug"));
    for (const auto& s : ds) {
      if (test_text.count(s.prompt.text)) continue;
      if (static_cast<int>(split.train.size()) < counts.train) split.train.push_back(s);
    }
    out.push_back(std::move(split));
  }
  return out;
}

void save_intents(const std::filesystem::path& dir, std::span<const AppSplit> splits) {
  std::filesystem::create_directories(dir);
  for (const auto& s : splits) {
    const std::string stem = "app" + std::to_string(s.application_id);
    intent::save_dataset(dir / (stem + "_demo.jsonl"), std::span<const intent::IntentSample>(s.demo));
    intent::save_dataset(dir / (stem + "_test.jsonl"), std::span<const intent::IntentSample>(s.test));
    intent::save_dataset(dir / (stem + "_train.jsonl"), std::span<const intent::IoKDSample>(s.train));
  }
}

// ---------------------------------------------------------------------------

std::vector<TrainedElam> build_market(const MarketConfig& market, std::span<const AppSplit> splits,
                                      const distill::DistillConfig& distill_config) {
  if (market.elams.empty()) throw ConfigError("market needs at least one E-LAM");
  std::vector<intent::IoKDSample> train;
  for (const auto& s : splits) train.insert(train.end(), s.train.begin(), s.train.end());
  std::vector<TrainedElam> out;
  for (const auto& spec : market.elams) {
    TrainedElam e;
    e.spec = spec;
    if (spec.kind == "student") {
      e.fee = spec.fee.value_or(market.fee_per_width * distill::hidden_width(spec.profile));
      distill::DistillConfig dc = distill_config;
      dc.profile = spec.profile;
      dc.seed = derive_seed(distill_config.seed, "elam." + spec.name);
      e.distilled = distill::train_distill(train, dc);
    } else if (spec.kind == "even") {
      e.fee = spec.fee.value_or(0.0);
    } else {
      throw ConfigError("unknown E-LAM kind '" + spec.kind + "'");
    }
    if (!(e.fee >= 0.0)) throw ConfigError("E-LAM fee must be >= 0");
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<srl::ElamProfile> market_profiles(std::span<const TrainedElam> market, double p_min) {
  std::vector<srl::ElamProfile> out;
  for (std::size_t i = 0; i < market.size(); ++i) {
    const auto& e = market[i];
    srl::ElamProfile p;
    p.id = static_cast<int>(i);
    p.name = e.spec.name;
    p.fee = e.fee;
    if (e.distilled)
      p.translator = std::make_shared<srl::StudentTranslator>(e.distilled->model, p_min);
    else
      p.translator = std::make_shared<srl::ConstantTranslator>(PreferenceVector::even());
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

BruteForceResult brute_force_optimum(const qoe::Scenario& scenario, const PreferenceVector& s,
                                     std::span<const double> fees, double fail_penalty, std::size_t max_chains) {
  if (fees.empty()) throw ConfigError("brute force needs at least one fee");
  const auto& net = scenario.network;
  const auto& req = scenario.request.required_types;
  const int n = static_cast<int>(req.size());
  // A dummy environment supplies the shared bonus definition.
  std::vector<srl::ElamProfile> elams;
  for (std::size_t k = 0; k < fees.size(); ++k)
    elams.push_back({static_cast<int>(k), "fee" + std::to_string(k), fees[k],
                     std::make_shared<srl::ConstantTranslator>(PreferenceVector::even())});
  srl::EnvConfig ec;
  ec.fail_penalty = fail_penalty;
  const srl::Environment env(scenario, elams, ec);

  BruteForceResult best;
  bool have = false;
  std::vector<int> chain;
  std::vector<char> used(static_cast<std::size_t>(net.size()), 0);
  std::function<void()> rec = [&]() {
    const int pos = static_cast<int>(chain.size());
    if (pos == n) {
      if (++best.chains > max_chains) throw SizeError("brute force search space exceeds the limit");
      for (std::size_t k = 0; k < fees.size(); ++k) {
        const double r = env.episode_bonus(chain, s.weights(), fees[k]);
        if (!have || r > best.reward) {
          best.reward = r;
          best.chain = chain;
          best.elam = static_cast<int>(k);
          have = true;
        }
      }
      return;
    }
    auto consider = [&](int v) {
      if (used[static_cast<std::size_t>(v)] || net.agent(v).service_type != req[static_cast<std::size_t>(pos)])
        return;
      used[static_cast<std::size_t>(v)] = 1;
      chain.push_back(v);
      rec();
      chain.pop_back();
      used[static_cast<std::size_t>(v)] = 0;
    };
    if (pos == 0) {
      for (int v = 0; v < net.size(); ++v) consider(v);
    } else {
      std::vector<int> nb = net.neighbors(chain.back());
      std::sort(nb.begin(), nb.end());
      for (int v : nb) consider(v);
    }
  };
  rec();
  if (!have) throw StructuralError("no type-valid connected chain exists");
  return best;
}

// ---------------------------------------------------------------------------

namespace {

distill::DistillConfig distill_config_from(const json& j) {
  distill::DistillConfig c;
  check_keys(j,
             {"beta_base", "scale_factor", "learning_rate", "epochs", "batch_size", "p_min", "seed", "vocab_step",
              "warm_start_epochs", "head", "profile"},
             "distill");
  read(j, "beta_base", c.beta_base);
  read(j, "scale_factor", c.scale_factor);
  read(j, "learning_rate", c.learning_rate);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "p_min", c.p_min);
  read(j, "seed", c.seed);
  read(j, "vocab_step", c.vocab_step);
  read(j, "warm_start_epochs", c.warm_start_epochs);
  if (j.contains("head")) c.head = distill::head_from_string(j.at("head").get<std::string>());
  if (j.contains("profile")) c.profile = distill::profile_from_string(j.at("profile").get<std::string>());
  if (c.epochs < 0 || c.batch_size < 1 || c.warm_start_epochs < 0 || !(c.learning_rate >= 0.0) ||
      !(c.beta_base > 0.0) || !(c.scale_factor >= 0.0) || !(c.vocab_step > 0.0))
    throw ConfigError("distill: invalid value");
  return c;
}

json distill_config_json(const distill::DistillConfig& c) {
  return {{"beta_base", c.beta_base},
          {"scale_factor", c.scale_factor},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"p_min", c.p_min},
          {"seed", c.seed},
          {"vocab_step", c.vocab_step},
          {"warm_start_epochs", c.warm_start_epochs},
          {"head", distill::to_string(c.head)},
          {"profile", distill::to_string(c.profile)}};
}

json intent_config_json(const intent::IntentConfig& c) {
  json kcs = json::array();
  for (const auto& k : c.keyword_classes) kcs.push_back({{"name", k.name}, {"keywords", k.keywords}, {"shift", k.shift}});
  json apps = json::array();
  for (const auto& a : c.applications)
    apps.push_back({{"id", a.id},
                    {"name", a.name},
                    {"base", a.base},
                    {"openers", a.openers},
                    {"tasks", a.tasks},
                    {"keyword_prob", a.keyword_prob}});
  return {{"noise_scale", c.noise_scale},
          {"outlier_rate", c.outlier_rate},
          {"clause_templates", c.clause_templates},
          {"keyword_classes", kcs},
          {"applications", apps}};
}

}  // namespace

ExperimentConfig experiment_config_from_json(std::string_view text) {
  const json j = parse_json(text, "experiment");
  ExperimentConfig c;
  try {
    check_keys(j,
               {"variants", "seeds", "episodes", "final_window", "scenario", "intents", "counts", "distill", "market",
                "env", "calibration", "srl", "population"},
               "experiment");
    read(j, "variants", c.variants);
    read(j, "seeds", c.seeds);
    read(j, "episodes", c.episodes);
    read(j, "final_window", c.final_window);
    if (j.contains("scenario")) c.scenario = scenario_config_from(j.at("scenario"));
    if (j.contains("intents")) c.intents = intent::intent_config_from_json(j.at("intents").dump());
    if (j.contains("counts")) {
      const json& jc = j.at("counts");
      check_keys(jc, {"demo", "test", "train", "history_per_app", "contrastive_k", "prompt_pool"}, "counts");
      read(jc, "demo", c.counts.demo);
      read(jc, "test", c.counts.test);
      read(jc, "train", c.counts.train);
      read(jc, "history_per_app", c.counts.history_per_app);
      read(jc, "contrastive_k", c.counts.contrastive_k);
      read(jc, "prompt_pool", c.counts.prompt_pool);
    }
    if (j.contains("distill")) c.distill = distill_config_from(j.at("distill"));
    if (j.contains("market")) {
      const json& jm = j.at("market");
      check_keys(jm, {"fee_per_width", "elams"}, "market");
      read(jm, "fee_per_width", c.market.fee_per_width);
      if (jm.contains("elams")) {
        c.market.elams.clear();
        for (const json& je : jm.at("elams")) {
          check_keys(je, {"name", "kind", "profile", "fee"}, "market.elams");
          ElamSpec e;
          e.name = je.at("name").get<std::string>();
          read(je, "kind", e.kind);
          if (je.contains("profile")) e.profile = distill::profile_from_string(je.at("profile").get<std::string>());
          if (je.contains("fee")) e.fee = je.at("fee").get<double>();
          if (e.kind != "student" && e.kind != "even") throw ConfigError("market: unknown kind '" + e.kind + "'");
          c.market.elams.push_back(std::move(e));
        }
      }
    }
    if (j.contains("env")) {
      const json& je = j.at("env");
      check_keys(je, {"delta", "fail_penalty", "graph_restricted"}, "env");
      read(je, "delta", c.env.delta);
      read(je, "fail_penalty", c.env.fail_penalty);
      read(je, "graph_restricted", c.env.graph_restricted);
    }
    if (j.contains("calibration")) {
      const json& jc = j.at("calibration");
      check_keys(jc, {"enabled", "memory_size", "k", "d0", "d1", "iota_min"}, "calibration");
      auto& cal = c.env.calibration;
      read(jc, "enabled", cal.enabled);
      read(jc, "memory_size", cal.memory_size);
      read(jc, "k", cal.k);
      read(jc, "d0", cal.d0);
      read(jc, "d1", cal.d1);
      read(jc, "iota_min", cal.iota_min);
    }
    if (j.contains("srl")) {
      const json& js = j.at("srl");
      check_keys(js,
                 {"algorithm", "gamma", "gae_lambda", "clip_eps", "ppo_epochs", "minibatch", "entropy_coef",
                  "value_coef", "learning_rate", "max_grad_norm", "episodes_per_update", "gcn_hidden", "gcn_layers",
                  "embed", "head_hidden"},
                 "srl");
      auto& s = c.srl;
      if (js.contains("algorithm")) s.algorithm = srl::algorithm_from_string(js.at("algorithm").get<std::string>());
      read(js, "gamma", s.gamma);
      read(js, "gae_lambda", s.gae_lambda);
      read(js, "clip_eps", s.clip_eps);
      read(js, "ppo_epochs", s.ppo_epochs);
      read(js, "minibatch", s.minibatch);
      read(js, "entropy_coef", s.entropy_coef);
      read(js, "value_coef", s.value_coef);
      read(js, "learning_rate", s.learning_rate);
      read(js, "max_grad_norm", s.max_grad_norm);
      read(js, "episodes_per_update", s.episodes_per_update);
      read(js, "gcn_hidden", s.policy.gcn_hidden);
      read(js, "gcn_layers", s.policy.gcn_layers);
      read(js, "embed", s.policy.embed);
      read(js, "head_hidden", s.policy.head_hidden);
    }
    if (j.contains("population")) {
      const json& jp = j.at("population");
      check_keys(jp, {"source", "application", "contamination", "size"}, "population");
      read(jp, "source", c.population.source);
      read(jp, "application", c.population.application);
      read(jp, "contamination", c.population.contamination);
      read(jp, "size", c.population.size);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment: ") + e.what());
  }
  const auto& pop = c.population;
  if ((pop.source != "test" && pop.source != "train") || pop.application < 0 ||
      !(pop.contamination >= 0.0 && pop.contamination < 1.0) || pop.size < 0 ||
      (pop.application == 0 && (pop.contamination > 0.0 || pop.size > 0)))
    throw ConfigError("experiment: invalid population");
  if (pop.application > 0) c.intents.application(pop.application);
  if (c.seeds.empty()) throw ConfigError("experiment: seeds must be non-empty");
  if (c.variants.empty()) throw ConfigError("experiment: variants must be non-empty");
  for (const auto& v : c.variants)
    if (v != "all") srl::variant_from_string(v);
  if (c.episodes < 0 || c.final_window < 1) throw ConfigError("experiment: bad episodes or final_window");
  const auto& s = c.srl;
  if (!(s.gamma >= 0.0 && s.gamma <= 1.0) || !(s.gae_lambda >= 0.0 && s.gae_lambda <= 1.0) || !(s.clip_eps >= 0.0) ||
      s.ppo_epochs < 1 || s.minibatch < 1 || s.episodes_per_update < 1 || !(s.learning_rate >= 0.0) ||
      !(s.entropy_coef >= 0.0) || !(s.value_coef >= 0.0) || !(s.max_grad_norm >= 0.0) || s.policy.gcn_hidden < 1 ||
      s.policy.gcn_layers < 1 || s.policy.embed < 1 || s.policy.head_hidden < 1)
    throw ConfigError("experiment: invalid srl settings");
  const auto& cal = c.env.calibration;
  if (cal.memory_size < 1 || cal.k < 1 || !(cal.d0 >= 0.0) || !(cal.d1 > cal.d0) ||
      !(cal.iota_min >= 0.0 && cal.iota_min <= 1.0))
    throw ConfigError("experiment: invalid calibration settings");
  if (!(c.env.fail_penalty >= 0.0) || !std::isfinite(c.env.delta)) throw ConfigError("experiment: invalid env");
  if (std::find(c.variants.begin(), c.variants.end(), "all") != c.variants.end())
    c.variants = {"srl", "random", "greedy", "even"};
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return experiment_config_from_json(buf.str());
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json elams = json::array();
  for (const auto& e : c.market.elams) {
    json je = {{"name", e.name}, {"kind", e.kind}, {"profile", distill::to_string(e.profile)}};
    if (e.fee) je["fee"] = *e.fee;
    elams.push_back(je);
  }
  const auto& s = c.srl;
  const auto& cal = c.env.calibration;
  const json j = {
      {"variants", c.variants},
      {"seeds", c.seeds},
      {"episodes", c.episodes},
      {"final_window", c.final_window},
      {"scenario", scenario_config_json(c.scenario)},
      {"intents", intent_config_json(c.intents)},
      {"counts",
       {{"demo", c.counts.demo},
        {"test", c.counts.test},
        {"train", c.counts.train},
        {"history_per_app", c.counts.history_per_app},
        {"contrastive_k", c.counts.contrastive_k},
        {"prompt_pool", c.counts.prompt_pool}}},
      {"distill", distill_config_json(c.distill)},
      {"market", {{"fee_per_width", c.market.fee_per_width}, {"elams", elams}}},
      {"env",
       {{"delta", c.env.delta}, {"fail_penalty", c.env.fail_penalty}, {"graph_restricted", c.env.graph_restricted}}},
      {"calibration",
       {{"enabled", cal.enabled},
        {"memory_size", cal.memory_size},
        {"k", cal.k},
        {"d0", cal.d0},
        {"d1", cal.d1},
        {"iota_min", cal.iota_min}}},
      {"srl",
       {{"algorithm", srl::to_string(s.algorithm)},
        {"gamma", s.gamma},
        {"gae_lambda", s.gae_lambda},
        {"clip_eps", s.clip_eps},
        {"ppo_epochs", s.ppo_epochs},
        {"minibatch", s.minibatch},
        {"entropy_coef", s.entropy_coef},
        {"value_coef", s.value_coef},
        {"learning_rate", s.learning_rate},
        {"max_grad_norm", s.max_grad_norm},
        {"episodes_per_update", s.episodes_per_update},
        {"gcn_hidden", s.policy.gcn_hidden},
        {"gcn_layers", s.policy.gcn_layers},
        {"embed", s.policy.embed},
        {"head_hidden", s.policy.head_hidden}}},
      {"population",
       {{"source", c.population.source},
        {"application", c.population.application},
        {"contamination", c.population.contamination},
        {"size", c.population.size}}}};
  return j.dump(1);
}

// ---------------------------------------------------------------------------

std::string content_hash(std::span<const std::string> parts) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (const auto& p : parts) {
    // Length prefix keeps ("ab","c") and ("a","bc") apart.
    const std::uint64_t len = p.size();
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(len >> (8 * i)));
    for (unsigned char c : p) mix(c);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

VariantStats window_stats(std::span<const srl::EpisodeRow> rows, int final_window) {
  if (final_window < 1) throw ConfigError("final_window must be positive");
  VariantStats v;
  v.rows = static_cast<int>(rows.size());
  if (!rows.empty()) {
    v.variant = srl::to_string(rows.front().variant);
    v.seed = rows.front().seed;
  }
  const std::size_t start = rows.size() > static_cast<std::size_t>(final_window) ? rows.size() - final_window : 0;
  const auto win = rows.subspan(start);
  v.window = static_cast<int>(win.size());
  if (win.empty()) return v;
  int cap_n = 0, feas = 0;
  for (const auto& r : win) {
    const auto& s = r.summary;
    v.reward_episode += s.reward_episode;
    v.reward_gt += s.reward_gt;
    v.return_episode += s.return_episode;
    v.return_gt += s.return_gt;
    if (s.feasible) ++feas;
    if (s.breakdown) {
      v.capability += s.breakdown->capability;
      ++cap_n;
    }
  }
  const double n = static_cast<double>(win.size());
  v.reward_episode /= n;
  v.reward_gt /= n;
  v.return_episode /= n;
  v.return_gt /= n;
  v.capability = cap_n ? v.capability / cap_n : 0.0;
  v.feasible_rate = feas / n;
  return v;
}

std::vector<Aggregate> aggregate(std::span<const VariantStats> stats) {
  std::vector<std::string> order;
  for (const auto& s : stats)
    if (std::find(order.begin(), order.end(), s.variant) == order.end()) order.push_back(s.variant);
  const std::vector<std::pair<std::string, double VariantStats::*>> metrics{
      {"reward_episode", &VariantStats::reward_episode}, {"reward_gt", &VariantStats::reward_gt},
      {"return_episode", &VariantStats::return_episode}, {"return_gt", &VariantStats::return_gt},
      {"capability", &VariantStats::capability},         {"feasible_rate", &VariantStats::feasible_rate}};
  std::vector<Aggregate> out;
  for (const auto& v : order)
    for (const auto& [name, field] : metrics) {
      std::vector<double> xs;
      for (const auto& s : stats)
        if (s.variant == v) xs.push_back(s.*field);
      Aggregate a{v, name, static_cast<int>(xs.size()), 0.0, 0.0};
      a.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
      if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - a.mean) * (x - a.mean);
        a.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
      }
      out.push_back(a);
    }
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

double num(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ConfigError("bad number '" + s + "'");
  return v;
}

}  // namespace

std::vector<srl::EpisodeRow> read_episode_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty log");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv(line);
  if (line != srl::episode_log_header()) throw ConfigError(path.string() + ": unexpected episode log columns");
  std::vector<srl::EpisodeRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size())
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    try {
      srl::EpisodeRow r;
      r.episode = std::stoi(f[0]);
      r.variant = srl::variant_from_string(f[1]);
      r.seed = std::stoull(f[2]);
      auto& s = r.summary;
      s.elam = std::stoi(f[3]);
      s.fee = num(f[4]);
      s.reward_episode = num(f[5]);
      s.reward_gt = num(f[6]);
      if (!f[7].empty()) {
        qoe::QoEBreakdown b;
        b.capability = num(f[7]);
        b.ber = num(f[8]);
        b.latency = num(f[9]);
        b.outage_prob = num(f[10]);
        s.breakdown = b;
      }
      s.feasible = f[11] == "1";
      r.actor_loss = num(f[12]);
      r.critic_loss = num(f[13]);
      r.entropy = num(f[14]);
      s.return_episode = num(f[15]);
      s.return_gt = num(f[16]);
      s.iota = num(f[17]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

std::string summary_to_json(const Summary& s, const std::string& config_echo) {
  json runs = json::array();
  for (const auto& r : s.runs)
    runs.push_back({{"variant", r.variant},
                    {"seed", r.seed},
                    {"rows", r.rows},
                    {"window", r.window},
                    {"reward_episode", r.reward_episode},
                    {"reward_gt", r.reward_gt},
                    {"return_episode", r.return_episode},
                    {"return_gt", r.return_gt},
                    {"capability", r.capability},
                    {"feasible_rate", r.feasible_rate}});
  json aggs = json::array();
  for (const auto& a : s.aggregates)
    aggs.push_back({{"variant", a.variant}, {"metric", a.metric}, {"seeds", a.seeds}, {"mean", a.mean}, {"std", a.std}});
  json j = {{"input_hash", s.input_hash}, {"logs_hash", s.logs_hash}, {"runs", runs}, {"aggregates", aggs}};
  if (!config_echo.empty()) j["config"] = parse_json(config_echo, "config echo");
  return j.dump(1);
}

Summary summarize_dir(const std::filesystem::path& dir, int final_window) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> logs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") logs.push_back(e.path());
  std::sort(logs.begin(), logs.end());
  Summary out;
  std::vector<std::string> bytes;
  for (const auto& p : logs) {
    bytes.push_back(file_bytes(p));
    const auto rows = read_episode_log(p);
    auto st = window_stats(rows, final_window);
    if (rows.empty()) {
      // Empty logs carry no rows; recover the identity from "{variant}_seed{N}".
      const std::string stem = p.stem().string();
      const auto at = stem.rfind("_seed");
      st.variant = stem.substr(0, at);
      if (at != std::string::npos) {
        try {
          st.seed = std::stoull(stem.substr(at + 5));
        } catch (const std::logic_error&) {
          st.seed = 0;
        }
      }
    }
    out.runs.push_back(st);
  }
  out.logs_hash = content_hash(bytes);
  out.aggregates = aggregate(out.runs);
  if (std::filesystem::exists(dir / "run.json")) {
    const json run = parse_json(file_bytes(dir / "run.json"), "run.json");
    if (run.contains("input_hash")) out.input_hash = run.at("input_hash").get<std::string>();
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<intent::IntentSample> served_users(std::span<const AppSplit> splits, const PopulationConfig& p) {
  auto source = [&](const AppSplit& a) {
    return p.source == "train" ? intent::to_intent_samples(a.train) : a.test;
  };
  std::vector<intent::IntentSample> out;
  if (p.application == 0) {
    for (const auto& a : splits) {
      const auto xs = source(a);
      out.insert(out.end(), xs.begin(), xs.end());
    }
    if (out.empty()) throw ConfigError("population is empty");
    return out;
  }
  std::vector<intent::IntentSample> own, other;
  for (const auto& a : splits) {
    const auto xs = source(a);
    auto& dst = a.application_id == p.application ? own : other;
    dst.insert(dst.end(), xs.begin(), xs.end());
  }
  std::size_t n_own = own.size(), n_other = 0;
  if (p.size > 0) {
    n_other = static_cast<std::size_t>(std::llround(p.size * p.contamination));
    n_own = static_cast<std::size_t>(p.size) - n_other;
  } else {
    n_other = static_cast<std::size_t>(std::llround(static_cast<double>(own.size()) * p.contamination /
                                                    (1.0 - p.contamination)));
  }
  if (n_own == 0 || n_own > own.size() || n_other > other.size())
    throw ConfigError("population: not enough users for application " + std::to_string(p.application));
  out.assign(own.begin(), own.begin() + static_cast<std::ptrdiff_t>(n_own));
  out.insert(out.end(), other.begin(), other.begin() + static_cast<std::ptrdiff_t>(n_other));
  return out;
}

std::string student_key(const ElamSpec& spec, const distill::DistillConfig& dc,
                        std::span<const intent::IoKDSample> train) {
  std::vector<std::string> parts{spec.name, spec.kind, distill::to_string(spec.profile),
                                 distill_config_json(dc).dump()};
  for (const auto& x : train) parts.push_back(intent::dataset_record_json(x));
  return content_hash(parts);
}

Workspace build_workspace(const ExperimentConfig& c, std::uint64_t master_seed, const WorkspaceOptions& options) {
  Workspace ws;
  ws.master_seed = master_seed;
  ws.scenario = options.scenario ? *options.scenario : generate_scenario(c.scenario, master_seed);
  ws.splits = generate_intents(c.intents, c.counts, master_seed);
  distill::DistillConfig dc = c.distill;
  dc.seed = master_seed;
  if (options.student_cache.empty()) {
    ws.market = build_market(c.market, ws.splits, dc);
  } else {
    std::vector<intent::IoKDSample> train;
    for (const auto& s : ws.splits) train.insert(train.end(), s.train.begin(), s.train.end());
    std::filesystem::create_directories(options.student_cache);
    for (const auto& spec : c.market.elams) {
      MarketConfig one{{spec}, c.market.fee_per_width};
      if (spec.kind != "student") {
        ws.market.push_back(build_market(one, ws.splits, dc).front());
        continue;
      }
      distill::DistillConfig sdc = dc;
      sdc.profile = spec.profile;
      sdc.seed = derive_seed(dc.seed, "elam." + spec.name);
      const auto path = options.student_cache / (spec.name + "-" + student_key(spec, sdc, train) + ".json");
      if (std::filesystem::exists(path)) {
        TrainedElam e;
        e.spec = spec;
        e.fee = spec.fee.value_or(c.market.fee_per_width * distill::hidden_width(spec.profile));
        auto m = distill::load_student(path);
        e.distilled = distill::DistillResult{m, m, PreferenceVector::even(), {}, 0};
        ws.market.push_back(std::move(e));
      } else {
        auto e = build_market(one, ws.splits, dc).front();
        distill::save_student(e.distilled->model, path);
        ws.market.push_back(std::move(e));
      }
    }
  }
  std::size_t vocab = 0;
  for (const auto& e : ws.market)
    if (e.distilled) vocab = e.distilled->model.vocab().size();
  ws.profiles = market_profiles(ws.market, vocab ? c.distill.resolved_p_min(vocab) : 0.0);
  ws.users = served_users(ws.splits, c.population);
  return ws;
}

std::string log_name(srl::Variant variant, std::uint64_t seed) {
  return srl::to_string(variant) + "_seed" + std::to_string(seed) + ".csv";
}

std::string policy_name(srl::Variant variant, std::uint64_t seed) {
  return srl::to_string(variant) + "_seed" + std::to_string(seed) + ".policy.json";
}

ArmResult run_arm(const Workspace& ws, const ExperimentConfig& c, srl::Variant variant, std::uint64_t seed) {
  srl::Environment env(ws.scenario, ws.profiles, c.env);
  srl::RunOptions opt;
  opt.episodes = c.episodes;
  opt.seed = seed;
  opt.srl = c.srl;
  ArmResult r;
  r.variant = variant;
  r.seed = seed;
  switch (variant) {
    case srl::Variant::kRandom: r.rows = srl::run_random(env, ws.users, opt); break;
    case srl::Variant::kGreedy: r.rows = srl::run_greedy(env, ws.users, opt); break;
    case srl::Variant::kSRL:
    case srl::Variant::kEven: {
      auto t = srl::train_srl(env, ws.users, opt, variant);
      r.rows = std::move(t.rows);
      r.policy.emplace(std::move(t.policy));
      break;
    }
  }
  return r;
}

std::string input_hash(const ExperimentConfig& c, const Workspace& ws) {
  const std::vector<std::string> parts{experiment_config_to_json(c), std::to_string(ws.master_seed),
                                       scenario_to_json(ws.scenario)};
  return content_hash(parts);
}

Summary run_experiment(const Workspace& ws, const ExperimentConfig& c, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  const std::string echo = experiment_config_to_json(c);
  const PreferenceVector mean = intent::mean_preference(ws.users);
  const json run = {{"master_seed", ws.master_seed},
                    {"input_hash", input_hash(c, ws)},
                    {"population_mean", {mean[0], mean[1], mean[2], mean[3]}},
                    {"users", ws.users.size()},
                    {"config", json::parse(echo)}};
  {
    std::ofstream f(out / "run.json", std::ios::binary);
    if (!f) throw ConfigError("cannot write " + (out / "run.json").string());
    f << run.dump(1) << '\n';
  }
  for (const auto& name : c.variants) {
    const srl::Variant v = srl::variant_from_string(name);
    for (std::uint64_t seed : c.seeds) {
      const ArmResult r = run_arm(ws, c, v, seed);
      srl::write_episode_log(out / log_name(v, seed), r.rows);
      if (r.policy) r.policy->save(out / policy_name(v, seed));
    }
  }
  const Summary s = summarize_dir(out, c.final_window);
  std::ofstream f(out / "summary.json", std::ios::binary);
  if (!f) throw ConfigError("cannot write " + (out / "summary.json").string());
  f << summary_to_json(s, echo) << '\n';
  return s;
}

std::vector<EvalRow> evaluate_policy(const Workspace& ws, const ExperimentConfig& c, const srl::PolicyNet& policy,
                                     std::span<const intent::IntentSample> users) {
  srl::Environment env(ws.scenario, ws.profiles, c.env);
  std::vector<EvalRow> out;
  for (std::size_t i = 0; i < users.size(); ++i) {
    EvalRow r;
    r.user = static_cast<int>(i);
    r.application_id = users[i].prompt.application_id;
    r.summary = srl::decode_greedy(policy, env, users[i]);
    env.remember();
    out.push_back(std::move(r));
  }
  return out;
}

void write_eval_log(const std::filesystem::path& path, std::span<const EvalRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "user,application_id,elam_id,fee,chain,reward_episode,reward_gt,return_episode,return_gt,capability,ber,"
         "latency,outage,feasible,iota,calibration\n"
      << std::setprecision(17);
  for (const auto& r : rows) {
    const auto& s = r.summary;
    std::string chain;
    for (std::size_t k = 0; k < s.chain.size(); ++k) chain += (k ? "-" : "") + std::to_string(s.chain[k]);
    out << r.user << ',' << r.application_id << ',' << s.elam << ',' << s.fee << ',' << chain << ','
        << s.reward_episode << ',' << s.reward_gt << ',' << s.return_episode << ',' << s.return_gt << ',';
    if (s.breakdown)
      out << s.breakdown->capability << ',' << s.breakdown->ber << ',' << s.breakdown->latency << ','
          << s.breakdown->outage_prob << ',';
    else
      out << ",,,,";
    out << (s.feasible ? 1 : 0) << ',' << s.iota << ',' << srl::to_string(s.calibration) << '\n';
  }
}

void write_match_log(const std::filesystem::path& path, std::span<const intent::IntentSample> users,
                     const srl::MatchResult& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "user,application_id,s_c,s_b,s_l,s_p,nearest,reward_a,reward_b\n" << std::setprecision(17);
  for (std::size_t i = 0; i < users.size(); ++i) {
    const auto& s = users[i].preference;
    out << i << ',' << users[i].prompt.application_id << ',' << s[0] << ',' << s[1] << ',' << s[2] << ',' << s[3]
        << ',' << m.nearest[i] << ',' << m.reward_a[i] << ',' << m.reward_b[i] << '\n';
  }
}

}  // namespace gensfc::harness
