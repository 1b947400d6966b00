#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "gensfc/error.hpp"
#include "gensfc/srl.hpp"

namespace gensfc::srl {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSRL: return "srl";
    case Variant::kRandom: return "random";
    case Variant::kGreedy: return "greedy";
    case Variant::kEven: return "even";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& name) {
  if (name == "srl") return Variant::kSRL;
  if (name == "random") return Variant::kRandom;
  if (name == "greedy") return Variant::kGreedy;
  if (name == "even") return Variant::kEven;
  throw ConfigError("unknown variant '" + name + "'");
}

namespace {

void check_users(const Environment& env, std::span<const IntentSample> users, const RunOptions& opt) {
  if (users.empty()) throw ConfigError("no users to serve");
  if (opt.episodes < 0) throw ConfigError("episodes must be >= 0");
  (void)env;
}

// Restores the override state of an environment on scope exit.
class OverrideGuard {
 public:
  explicit OverrideGuard(Environment& env) : env_(env) {}
  ~OverrideGuard() {
    env_.set_preference_override(std::nullopt);
    env_.set_translation_override(std::nullopt);
    env_.set_fee_enabled(true);
  }
  OverrideGuard(const OverrideGuard&) = delete;
  OverrideGuard& operator=(const OverrideGuard&) = delete;

 private:
  Environment& env_;
};

int uniform_valid(const std::vector<std::uint8_t>& mask, Rng& rng) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<int>(i));
  if (idx.empty()) throw ContractViolation("no valid action");
  return idx[static_cast<std::size_t>(rng.index(idx.size()))];
}

EpisodeRow make_row(int episode, Variant v, std::uint64_t seed, const EpisodeSummary& s) {
  EpisodeRow r;
  r.episode = episode;
  r.variant = v;
  r.seed = seed;
  r.summary = s;
  return r;
}

}  // namespace

TrainResult train_srl(Environment& env, std::span<const IntentSample> users, const RunOptions& opt,
                      Variant variant) {
  check_users(env, users, opt);
  if (variant != Variant::kSRL && variant != Variant::kEven)
    throw ConfigError("train_srl supports the srl and even variants");
  if (opt.srl.episodes_per_update < 1) throw ConfigError("episodes_per_update must be positive");
  OverrideGuard guard(env);
  if (variant == Variant::kEven) env.set_preference_override(PreferenceVector::even());

  PolicyNet policy(env.num_agents(), env.num_elams(), env.chain_length(), opt.srl.policy,
                   derive_seed(opt.seed, "srl.policy"));
  Rng user_rng(derive_seed(opt.seed, "srl.users"));
  Rng act_rng(derive_seed(opt.seed, "srl.act"));
  Rng update_rng(derive_seed(opt.seed, "srl.update"));
  std::vector<EpisodeRow> rows;
  rows.reserve(static_cast<std::size_t>(opt.episodes));
  std::vector<Transition> batch;
  int pending = 0;
  for (int ep = 0; ep < opt.episodes; ++ep) {
    env.begin(users[static_cast<std::size_t>(user_rng.index(users.size()))]);
    while (!env.done()) {
      Transition tr;
      tr.obs = env.observe();
      const ActResult a = act(policy, env.norm_adjacency(), tr.obs, act_rng);
      tr.action = a.action;
      tr.logprob = a.logprob;
      tr.value = a.value;
      tr.reward = env.step(a.action);
      tr.terminal = env.done();
      batch.push_back(std::move(tr));
    }
    env.remember();
    rows.push_back(make_row(ep, variant, opt.seed, env.summary()));
    if (++pending == opt.srl.episodes_per_update || ep + 1 == opt.episodes) {
      const UpdateStats st = opt.srl.algorithm == Algorithm::kPPO
                                 ? ppo_update(policy, env.norm_adjacency(), batch, opt.srl, update_rng)
                                 : reinforce_update(policy, env.norm_adjacency(), batch, opt.srl);
      rows.back().actor_loss = st.actor_loss;
      rows.back().critic_loss = st.critic_loss;
      rows.back().entropy = st.entropy;
      batch.clear();
      pending = 0;
    }
  }
  return TrainResult{std::move(policy), std::move(rows)};
}

std::vector<EpisodeRow> run_random(Environment& env, std::span<const IntentSample> users,
                                   const RunOptions& opt) {
  check_users(env, users, opt);
  Rng rng(derive_seed(opt.seed, "random.policy"));
  Rng user_rng(derive_seed(opt.seed, "srl.users"));
  std::vector<EpisodeRow> rows;
  for (int ep = 0; ep < opt.episodes; ++ep) {
    env.begin(users[static_cast<std::size_t>(user_rng.index(users.size()))]);
    while (!env.done()) env.step(uniform_valid(env.valid_actions(), rng));
    env.remember();
    rows.push_back(make_row(ep, Variant::kRandom, opt.seed, env.summary()));
  }
  return rows;
}

int greedy_node(const Environment& env, const std::vector<std::uint8_t>& mask, int prev, int pos,
                const PreferenceVector& s) {
  const auto& net = env.scenario().network;
  const auto& req = env.scenario().request.required_types;
  std::vector<int> cands, typed;
  for (int i = 0; i < env.num_agents(); ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    cands.push_back(i);
    if (pos < static_cast<int>(req.size()) && net.agent(i).service_type == req[static_cast<std::size_t>(pos)])
      typed.push_back(i);
  }
  if (cands.empty()) throw ContractViolation("greedy_node: no valid agent");
  if (!typed.empty()) cands = typed;
  std::array<std::size_t, kPrefDim> rank{};
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  auto score = [&](int i) {
    double ber = 0.0;
    if (prev >= 0) ber = net.link_ber(prev, i).value_or(std::numeric_limits<double>::infinity());
    const Weights f = env.normalizer().factors(i, ber);
    return std::pair{f[rank[0]], f[rank[1]]};
  };
  int best = cands.front();
  auto best_score = score(best);
  for (std::size_t c = 1; c < cands.size(); ++c) {
    const auto sc = score(cands[c]);
    if (sc > best_score) {
      best = cands[c];
      best_score = sc;
    }
  }
  return best;
}

std::vector<EpisodeRow> run_greedy(Environment& env, std::span<const IntentSample> users,
                                   const RunOptions& opt) {
  check_users(env, users, opt);
  Rng user_rng(derive_seed(opt.seed, "srl.users"));
  int cheapest = 0;
  for (int k = 1; k < env.num_elams(); ++k)
    if (env.elams()[static_cast<std::size_t>(k)].fee < env.elams()[static_cast<std::size_t>(cheapest)].fee)
      cheapest = k;
  std::vector<EpisodeRow> rows;
  for (int ep = 0; ep < opt.episodes; ++ep) {
    env.begin(users[static_cast<std::size_t>(user_rng.index(users.size()))]);
    std::vector<int> chain;
    while (!env.done()) {
      if (env.awaiting_elam()) {
        env.step(env.num_agents() + cheapest);
        continue;
      }
      const Observation obs = env.observe();
      const int a = greedy_node(env, obs.mask, chain.empty() ? -1 : chain.back(),
                                static_cast<int>(chain.size()), obs.s);
      chain.push_back(a);
      env.step(a);
    }
    env.remember();
    rows.push_back(make_row(ep, Variant::kGreedy, opt.seed, env.summary()));
  }
  return rows;
}

EpisodeSummary decode_greedy(const PolicyNet& policy, Environment& env, const IntentSample& user) {
  Rng unused(0);
  env.begin(user);
  while (!env.done()) env.step(act(policy, env.norm_adjacency(), env.observe(), unused, true).action);
  return env.summary();
}

MatchResult policy_match_experiment(const PolicyNet& policy_a, const PolicyNet& policy_b, Environment& env,
                                    std::span<const IntentSample> users, const PreferenceVector& mean_a,
                                    const PreferenceVector& mean_b, std::uint64_t seed) {
  OverrideGuard guard(env);
  env.set_fee_enabled(false);
  Rng rng(derive_seed(seed, "match.ties"));
  MatchResult out;
  double wins = 0.0;
  for (const auto& user : users) {
    env.set_translation_override(user.preference);
    const double ra = decode_greedy(policy_a, env, user).return_gt;
    const double rb = decode_greedy(policy_b, env, user).return_gt;
    const int nearest = cosine4(user.preference.weights(), mean_a.weights()) >=
                                cosine4(user.preference.weights(), mean_b.weights())
                            ? 0
                            : 1;
    const double own = nearest == 0 ? ra : rb, other = nearest == 0 ? rb : ra;
    if (std::abs(own - other) <= 1e-12) {
      ++out.ties;
      if (rng.bernoulli(0.5)) wins += 1.0;
    } else if (own > other) {
      wins += 1.0;
    }
    out.nearest.push_back(nearest);
    out.reward_a.push_back(ra);
    out.reward_b.push_back(rb);
  }
  out.users = static_cast<int>(users.size());
  out.fraction = users.empty() ? 0.0 : wins / static_cast<double>(users.size());
  return out;
}

std::string episode_log_header() {
  return "episode,variant,seed,elam_id,fee,reward_episode,reward_gt,capability,ber,latency,outage,"
         "feasible,actor_loss,critic_loss,entropy,return_episode,return_gt,iota,calibration";
}

void write_episode_log(const std::filesystem::path& path, std::span<const EpisodeRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << episode_log_header() << '\n' << std::setprecision(17);
  auto opt_num = [&](double x) {
    if (std::isfinite(x)) out << x;
  };
  for (const auto& r : rows) {
    const auto& s = r.summary;
    out << r.episode << ',' << to_string(r.variant) << ',' << r.seed << ',' << s.elam << ',' << s.fee << ','
        << s.reward_episode << ',' << s.reward_gt << ',';
    if (s.breakdown)
      out << s.breakdown->capability << ',' << s.breakdown->ber << ',' << s.breakdown->latency << ','
          << s.breakdown->outage_prob << ',';
    else
      out << ",,,,";
    out << (s.feasible ? 1 : 0) << ',';
    opt_num(r.actor_loss);
    out << ',';
    opt_num(r.critic_loss);
    out << ',';
    opt_num(r.entropy);
    out << ',' << s.return_episode << ',' << s.return_gt << ',' << s.iota << ',' << to_string(s.calibration)
        << '\n';
  }
}

}  // namespace gensfc::srl
