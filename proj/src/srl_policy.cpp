#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "gensfc/error.hpp"
#include "gensfc/srl.hpp"
#include "json.hpp"

namespace gensfc::srl {

namespace {

std::string gcn_name(int l) { return "gcn" + std::to_string(l); }

// Forward through a relu hidden layer and a linear output.
nn::Matrix mlp_head(const nn::Matrix& z, const nn::ParamBundle& p, const std::string& pfx,
                    nn::Matrix& pre) {
  pre = nn::dense_forward(z, p.value(pfx + "_w1"), p.value(pfx + "_b1"));
  return nn::dense_forward(nn::relu(pre), p.value(pfx + "_w2"), p.value(pfx + "_b2"));
}

// Backward through mlp_head; returns d/dz.
nn::Matrix mlp_head_backward(const nn::Matrix& z, nn::ParamBundle& p, const std::string& pfx,
                             const nn::Matrix& pre, const nn::Matrix& dout) {
  const nn::Matrix hidden = nn::relu(pre);
  auto g2 = nn::dense_backward(hidden, p.value(pfx + "_w2"), dout);
  p.grad(pfx + "_w2") += g2.dw;
  p.grad(pfx + "_b2") += g2.db;
  const nn::Matrix dpre = nn::relu_backward(pre, g2.dx);
  auto g1 = nn::dense_backward(z, p.value(pfx + "_w1"), dpre);
  p.grad(pfx + "_w1") += g1.dw;
  p.grad(pfx + "_b1") += g1.db;
  return std::move(g1.dx);
}

}  // namespace

PolicyNet::PolicyNet(int n_agents, int n_elams, int chain_length, PolicyConfig config,
                     std::uint64_t seed)
    : n_agents_(n_agents), n_elams_(n_elams), chain_length_(chain_length), config_(config), seed_(seed) {
  if (n_agents < 1 || n_elams < 1 || chain_length < 1) throw ConfigError("bad policy dimensions");
  if (config.gcn_hidden < 1 || config.gcn_layers < 1 || config.embed < 1 || config.head_hidden < 1)
    throw ConfigError("bad policy sizes");
  Rng rng(derive_seed(seed, "policy.init"));
  int in = kNodeFeatures;
  for (int l = 0; l < config.gcn_layers; ++l) {
    params_.add(gcn_name(l), nn::glorot_uniform(in, config.gcn_hidden, rng));
    in = config.gcn_hidden;
  }
  params_.add("intent_w", nn::glorot_uniform(static_cast<int>(kPrefDim) + chain_length + 1, config.embed, rng));
  params_.add("intent_b", nn::Matrix(1, config.embed));
  params_.add("model_table", nn::glorot_uniform(n_elams + 1, config.embed, rng));
  const int latent = config.gcn_hidden + 2 * config.embed;
  // Agents are scored from their own embedding and z; E-LAMs from z alone.
  // Small output layers give a near-uniform initial policy.
  params_.add("node_w", nn::glorot_uniform(config.gcn_hidden, config.head_hidden, rng));
  // Skip path from the raw features; dense graphs smooth embeddings together.
  params_.add("node_x", nn::glorot_uniform(kNodeFeatures, config.head_hidden, rng));
  params_.add("node_z", nn::glorot_uniform(latent, config.head_hidden, rng));
  params_.add("node_b", nn::Matrix(1, config.head_hidden));
  nn::Matrix nv = nn::glorot_uniform(config.head_hidden, 1, rng);
  nv *= 0.1;
  params_.add("node_v", std::move(nv));
  params_.add("actor_w1", nn::glorot_uniform(latent, config.head_hidden, rng));
  params_.add("actor_b1", nn::Matrix(1, config.head_hidden));
  nn::Matrix aw2 = nn::glorot_uniform(config.head_hidden, n_elams, rng);
  aw2 *= 0.01;
  params_.add("actor_w2", std::move(aw2));
  params_.add("actor_b2", nn::Matrix(1, n_elams));
  params_.add("critic_w1", nn::glorot_uniform(latent, config.head_hidden, rng));
  params_.add("critic_b1", nn::Matrix(1, config.head_hidden));
  params_.add("critic_w2", nn::glorot_uniform(config.head_hidden, 1, rng));
  params_.add("critic_b2", nn::Matrix(1, 1));
}

PolicyNet::Forward PolicyNet::forward(const nn::Matrix& norm_adj, const Observation& obs) const {
  if (obs.x.rows() != n_agents_ || obs.x.cols() != kNodeFeatures)
    throw SizeError("observation does not match the policy");
  Forward f;
  std::vector<const nn::Matrix*> w;
  for (int l = 0; l < config_.gcn_layers; ++l) w.push_back(&params_.value(gcn_name(l)));
  f.h = nn::gcn_forward(norm_adj, obs.x, w, &f.gcn);
  const nn::Matrix g = nn::mean_pool(f.h);

  f.u = nn::Matrix(1, static_cast<int>(kPrefDim) + chain_length_ + 1);
  if (obs.has_s)
    for (std::size_t i = 0; i < kPrefDim; ++i) f.u(0, static_cast<int>(i)) = obs.s[i];
  f.u(0, static_cast<int>(kPrefDim) + std::clamp(obs.step, 0, chain_length_)) = 1.0;
  f.intent_pre = nn::dense_forward(f.u, params_.value("intent_w"), params_.value("intent_b"));

  f.elam_row = obs.elam >= 0 && obs.elam < n_elams_ ? obs.elam : n_elams_;
  f.model_pre = nn::Matrix::row(params_.value("model_table").row_span(f.elam_row));

  const int latent = config_.gcn_hidden + 2 * config_.embed;
  f.z = nn::Matrix(1, latent);
  std::copy(g.values().begin(), g.values().end(), f.z.values().begin());
  const nn::Matrix ri = nn::relu(f.intent_pre), rm = nn::relu(f.model_pre);
  std::copy(ri.values().begin(), ri.values().end(), f.z.values().begin() + config_.gcn_hidden);
  std::copy(rm.values().begin(), rm.values().end(),
            f.z.values().begin() + config_.gcn_hidden + config_.embed);

  f.node_pre = nn::matmul(f.h, params_.value("node_w"));
  f.node_pre += nn::matmul(obs.x, params_.value("node_x"));
  const nn::Matrix zz = nn::dense_forward(f.z, params_.value("node_z"), params_.value("node_b"));
  const nn::Matrix& v = params_.value("node_v");
  f.logits.assign(static_cast<std::size_t>(num_actions()), 0.0);
  for (int i = 0; i < n_agents_; ++i) {
    double acc = 0.0;
    for (int j = 0; j < config_.head_hidden; ++j) {
      double& pre = f.node_pre(i, j);
      pre += zz(0, j);
      if (pre > 0.0) acc += pre * v(j, 0);
    }
    f.logits[static_cast<std::size_t>(i)] = acc;
  }
  const nn::Matrix elam_logits = mlp_head(f.z, params_, "actor", f.actor_pre);
  std::copy(elam_logits.values().begin(), elam_logits.values().end(), f.logits.begin() + n_agents_);
  f.value = mlp_head(f.z, params_, "critic", f.critic_pre)[0];
  return f;
}

nn::Matrix PolicyNet::encode(const nn::Matrix& norm_adj, const Observation& obs) const {
  return forward(norm_adj, obs).z;
}

void PolicyNet::backward(const nn::Matrix& norm_adj, const Observation& obs, const Forward& f,
                         std::span<const double> dlogits, double dvalue) {
  if (static_cast<int>(dlogits.size()) != num_actions()) throw SizeError("dlogits size");
  nn::Matrix dz = mlp_head_backward(f.z, params_, "actor", f.actor_pre,
                                    nn::Matrix::row(dlogits.subspan(static_cast<std::size_t>(n_agents_))));
  const std::vector<double> dv{dvalue};
  dz += mlp_head_backward(f.z, params_, "critic", f.critic_pre, nn::Matrix::row(dv));

  const int hh = config_.head_hidden;
  const nn::Matrix& v = params_.value("node_v");
  nn::Matrix& gv = params_.grad("node_v");
  nn::Matrix dpre(n_agents_, hh);
  nn::Matrix dzz(1, hh);
  for (int i = 0; i < n_agents_; ++i) {
    const double dl = dlogits[static_cast<std::size_t>(i)];
    if (dl == 0.0) continue;
    for (int j = 0; j < hh; ++j) {
      const double pre = f.node_pre(i, j);
      if (pre <= 0.0) continue;
      gv(j, 0) += dl * pre;
      dpre(i, j) = dl * v(j, 0);
      dzz(0, j) += dpre(i, j);
    }
  }
  params_.grad("node_w") += nn::matmul_tn(f.h, dpre);
  params_.grad("node_x") += nn::matmul_tn(obs.x, dpre);
  params_.grad("node_z") += nn::matmul_tn(f.z, dzz);
  params_.grad("node_b") += dzz;
  dz += nn::matmul_nt(dzz, params_.value("node_z"));
  nn::Matrix dh = nn::matmul_nt(dpre, params_.value("node_w"));

  const int gh = config_.gcn_hidden, e = config_.embed;
  nn::Matrix dg(1, gh), di(1, e), dm(1, e);
  for (int j = 0; j < gh; ++j) dg(0, j) = dz(0, j);
  for (int j = 0; j < e; ++j) {
    di(0, j) = f.intent_pre(0, j) > 0.0 ? dz(0, gh + j) : 0.0;
    dm(0, j) = f.model_pre(0, j) > 0.0 ? dz(0, gh + e + j) : 0.0;
  }
  const auto gi = nn::dense_backward(f.u, params_.value("intent_w"), di);
  params_.grad("intent_w") += gi.dw;
  params_.grad("intent_b") += gi.db;
  auto table = params_.grad("model_table").row_span(f.elam_row);
  for (int j = 0; j < e; ++j) table[static_cast<std::size_t>(j)] += dm(0, j);

  std::vector<const nn::Matrix*> w;
  std::vector<nn::Matrix> dw;
  for (int l = 0; l < config_.gcn_layers; ++l) {
    w.push_back(&params_.value(gcn_name(l)));
    dw.emplace_back(w.back()->rows(), w.back()->cols());
  }
  std::vector<nn::Matrix*> dwp;
  for (auto& m : dw) dwp.push_back(&m);
  dh += nn::mean_pool_backward(dg, obs.x.rows());
  nn::gcn_backward(norm_adj, f.gcn, w, dh, dwp);
  for (int l = 0; l < config_.gcn_layers; ++l) params_.grad(gcn_name(l)) += dw[static_cast<std::size_t>(l)];
}

void PolicyNet::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "gensfc-policy";
  j["version"] = 1;
  j["n_agents"] = n_agents_;
  j["n_elams"] = n_elams_;
  j["chain_length"] = chain_length_;
  j["seed"] = seed_;
  j["config"] = {{"gcn_hidden", config_.gcn_hidden},
                 {"gcn_layers", config_.gcn_layers},
                 {"embed", config_.embed},
                 {"head_hidden", config_.head_hidden}};
  nlohmann::json params = nlohmann::json::object();
  for (const auto& name : params_.names()) {
    const nn::Matrix& m = params_.value(name);
    params[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
  }
  j["params"] = std::move(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump() << '\n';
}

PolicyNet PolicyNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (j.at("format") != "gensfc-policy") throw ConfigError("not a policy checkpoint");
    const auto& c = j.at("config");
    PolicyConfig cfg{c.at("gcn_hidden").get<int>(), c.at("gcn_layers").get<int>(), c.at("embed").get<int>(),
                     c.at("head_hidden").get<int>()};
    PolicyNet net(j.at("n_agents").get<int>(), j.at("n_elams").get<int>(), j.at("chain_length").get<int>(),
                  cfg, j.at("seed").get<std::uint64_t>());
    for (const auto& name : net.params_.names()) {
      const auto& jm = j.at("params").at(name);
      nn::Matrix& m = net.params_.value(name);
      if (jm.at("rows").get<int>() != m.rows() || jm.at("cols").get<int>() != m.cols())
        throw ConfigError("checkpoint shape mismatch for " + name);
      m.values() = jm.at("values").get<std::vector<double>>();
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<double> masked_log_softmax(std::span<const double> logits, std::span<const std::uint8_t> mask) {
  if (logits.size() != mask.size()) throw SizeError("logits and mask differ in size");
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  double mx = ninf;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) mx = std::max(mx, logits[i]);
  if (mx == ninf) throw ContractViolation("every action is masked");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) sum += std::exp(logits[i] - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size(), ninf);
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) out[i] = logits[i] - lse;
  return out;
}

ActResult act(const PolicyNet& policy, const nn::Matrix& norm_adj, const Observation& obs, Rng& rng,
              bool greedy) {
  const auto f = policy.forward(norm_adj, obs);
  const auto lp = masked_log_softmax(f.logits, obs.mask);
  int a = -1;
  if (greedy) {
    for (std::size_t i = 0; i < lp.size(); ++i)
      if (obs.mask[i] && (a < 0 || lp[i] > lp[static_cast<std::size_t>(a)])) a = static_cast<int>(i);
  } else {
    std::vector<double> p(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) p[i] = obs.mask[i] ? std::exp(lp[i]) : 0.0;
    a = rng.categorical(p);
  }
  return {a, lp[static_cast<std::size_t>(a)], f.value};
}

// ---------------------------------------------------------------------------

std::vector<double> gae(std::span<const Transition> traj, double gamma, double gae_lambda) {
  std::vector<double> adv(traj.size(), 0.0);
  double next_adv = 0.0, next_value = 0.0;
  for (std::size_t t = traj.size(); t-- > 0;) {
    if (traj[t].terminal) next_adv = next_value = 0.0;
    const double delta = traj[t].reward + gamma * next_value - traj[t].value;
    adv[t] = delta + gamma * gae_lambda * next_adv;
    next_adv = adv[t];
    next_value = traj[t].value;
  }
  return adv;
}

void normalize_advantages(std::vector<double>& adv) {
  if (adv.empty()) return;
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(adv.size());
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(adv.size()));
  for (double& a : adv) a -= mean;
  if (sd > 1e-12)
    for (double& a : adv) a /= sd;
}

std::string to_string(Algorithm a) { return a == Algorithm::kPPO ? "ppo" : "reinforce"; }

Algorithm algorithm_from_string(const std::string& name) {
  if (name == "ppo") return Algorithm::kPPO;
  if (name == "reinforce") return Algorithm::kREINFORCE;
  throw ConfigError("unknown algorithm '" + name + "'");
}

namespace {

// Shared loss body. `ppo` selects the clipped surrogate, otherwise the
// plain policy gradient.
LossParts policy_loss(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition* const> batch,
                      std::span<const double> adv, std::span<const double> returns, const SrlConfig& cfg,
                      bool with_grad, bool ppo) {
  if (adv.size() != batch.size() || returns.size() != batch.size()) throw SizeError("batch size mismatch");
  LossParts out;
  if (batch.empty()) return out;
  const double m = static_cast<double>(batch.size());
  std::vector<double> dlogits;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Transition& tr = *batch[b];
    const auto f = policy.forward(norm_adj, tr.obs);
    const auto lp = masked_log_softmax(f.logits, tr.obs.mask);
    const auto a = static_cast<std::size_t>(tr.action);
    const double A = adv[b];
    double coef;  // d(actor loss)/d(log pi(a)), before the 1/m
    if (ppo) {
      const double ratio = std::exp(lp[a] - tr.logprob);
      out.max_ratio_dev = std::max(out.max_ratio_dev, std::abs(ratio - 1.0));
      const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
      const double s1 = ratio * A, s2 = clipped * A;
      out.actor -= std::min(s1, s2) / m;
      coef = s1 <= s2 ? -A * ratio : 0.0;
    } else {
      out.actor -= lp[a] * A / m;
      coef = -A;
    }
    double h = 0.0;
    for (std::size_t j = 0; j < lp.size(); ++j)
      if (tr.obs.mask[j]) h -= std::exp(lp[j]) * lp[j];
    out.entropy += h / m;
    const double err = f.value - returns[b];
    out.critic += 0.5 * err * err / m;
    if (!with_grad) continue;
    dlogits.assign(lp.size(), 0.0);
    for (std::size_t j = 0; j < lp.size(); ++j) {
      if (!tr.obs.mask[j]) continue;
      const double p = std::exp(lp[j]);
      dlogits[j] = (coef * ((j == a ? 1.0 : 0.0) - p) + cfg.entropy_coef * p * (lp[j] + h)) / m;
    }
    policy.backward(norm_adj, tr.obs, f, dlogits, cfg.value_coef * err / m);
  }
  out.total = out.actor + cfg.value_coef * out.critic - cfg.entropy_coef * out.entropy;
  return out;
}

void check_finite(const LossParts& l, const nn::ParamBundle& p) {
  if (!std::isfinite(l.total) || !std::isfinite(p.grad_norm()))
    throw TrainingError("non-finite loss or gradient in policy update");
}

void clip_and_step(PolicyNet& policy, const SrlConfig& cfg) {
  auto& p = policy.params();
  const double norm = p.grad_norm();
  if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) p.scale_grads(cfg.max_grad_norm / norm);
  p.adam_step({cfg.learning_rate});
}

struct Targets {
  std::vector<double> adv, returns;
};

Targets targets(std::span<const Transition> batch, const SrlConfig& cfg) {
  Targets t;
  t.adv = gae(batch, cfg.gamma, cfg.gae_lambda);
  t.returns.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) t.returns[i] = t.adv[i] + batch[i].value;
  normalize_advantages(t.adv);
  return t;
}

}  // namespace

LossParts ppo_loss(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition* const> batch,
                   std::span<const double> adv, std::span<const double> returns, const SrlConfig& cfg,
                   bool with_grad) {
  return policy_loss(policy, norm_adj, batch, adv, returns, cfg, with_grad, true);
}

LossParts reinforce_loss(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition* const> batch,
                         std::span<const double> adv, std::span<const double> returns, const SrlConfig& cfg,
                         bool with_grad) {
  return policy_loss(policy, norm_adj, batch, adv, returns, cfg, with_grad, false);
}

UpdateStats ppo_update(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition> batch,
                       const SrlConfig& cfg, Rng& rng) {
  UpdateStats stats;
  if (batch.empty()) return stats;
  if (cfg.ppo_epochs < 1 || cfg.minibatch < 1) throw ConfigError("ppo_epochs and minibatch must be positive");
  const Targets t = targets(batch, cfg);
  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const Transition*> mb;
  std::vector<double> mb_adv, mb_ret;
  double weight = 0.0;
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch));
      mb.clear();
      mb_adv.clear();
      mb_ret.clear();
      for (std::size_t i = start; i < end; ++i) {
        mb.push_back(&batch[order[i]]);
        mb_adv.push_back(t.adv[order[i]]);
        mb_ret.push_back(t.returns[order[i]]);
      }
      policy.params().zero_grad();
      const LossParts l = ppo_loss(policy, norm_adj, mb, mb_adv, mb_ret, cfg, true);
      check_finite(l, policy.params());
      if (epoch == 0) {
        if (start == 0) stats.first_epoch_max_ratio_dev = l.max_ratio_dev;
        const double w = static_cast<double>(end - start);
        stats.actor_loss += w * l.actor;
        stats.critic_loss += w * l.critic;
        stats.entropy += w * l.entropy;
        weight += w;
      }
      clip_and_step(policy, cfg);
    }
  }
  stats.actor_loss /= weight;
  stats.critic_loss /= weight;
  stats.entropy /= weight;
  return stats;
}

UpdateStats reinforce_update(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition> batch,
                             const SrlConfig& cfg) {
  UpdateStats stats;
  if (batch.empty()) return stats;
  const Targets t = targets(batch, cfg);
  std::vector<const Transition*> all;
  for (const auto& tr : batch) all.push_back(&tr);
  policy.params().zero_grad();
  const LossParts l = reinforce_loss(policy, norm_adj, all, t.adv, t.returns, cfg, true);
  check_finite(l, policy.params());
  clip_and_step(policy, cfg);
  stats.actor_loss = l.actor;
  stats.critic_loss = l.critic;
  stats.entropy = l.entropy;
  return stats;
}

}  // namespace gensfc::srl
