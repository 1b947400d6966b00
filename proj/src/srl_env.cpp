#include <algorithm>
#include <cmath>
#include <limits>

#include "gensfc/error.hpp"
#include "gensfc/srl.hpp"

namespace gensfc::srl {

StudentTranslator::StudentTranslator(distill::StudentModel model, double p_min)
    : model_(std::move(model)), p_min_(p_min) {}

std::optional<PreferenceVector> StudentTranslator::translate(const intent::Prompt& prompt) const {
  const auto it = cache_.find(prompt.text);
  if (it != cache_.end()) return it->second;
  auto s = distill::predict(model_, prompt.text, p_min_);
  cache_.emplace(prompt.text, s);
  return s;
}

// ---------------------------------------------------------------------------

ContextMemory::ContextMemory(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ConfigError("memory capacity must be positive");
}

void ContextMemory::push(MemoryRecord r) {
  records_.push_front(std::move(r));
  while (static_cast<int>(records_.size()) > capacity_) records_.pop_back();
}

std::vector<MemoryRecord> ContextMemory::recent(int k) const {
  const auto n = std::min<std::size_t>(records_.size(), static_cast<std::size_t>(std::max(k, 0)));
  return {records_.begin(), records_.begin() + static_cast<long>(n)};
}

PreferenceVector ContextMemory::mean_recent(int k) const {
  if (records_.empty()) throw SizeError("mean_recent: empty memory");
  const auto rec = recent(std::max(k, 1));
  Weights w{};
  for (const auto& r : rec)
    for (std::size_t i = 0; i < kPrefDim; ++i) w[i] += r.s[i];
  for (double& x : w) x /= static_cast<double>(rec.size());
  return PreferenceVector::project(w);
}

std::string to_string(CalibrationMode m) {
  switch (m) {
    case CalibrationMode::kIdentity: return "identity";
    case CalibrationMode::kConfident: return "confident";
    case CalibrationMode::kAgrees: return "agrees";
    case CalibrationMode::kShrunk: return "shrunk";
    case CalibrationMode::kRecovered: return "recovered";
  }
  return "unknown";
}

double calibration_factor(double distance, const CalibrationConfig& cfg) {
  if (distance <= cfg.d0) return 1.0;
  if (distance >= cfg.d1) return cfg.iota_min;
  return 1.0 - (distance - cfg.d0) / (cfg.d1 - cfg.d0) * (1.0 - cfg.iota_min);
}

namespace {

// Recent vectors all within d0 of their mean and the newer half of the
// rewards at least as high as the older half.
bool consistent_and_rising(const std::vector<MemoryRecord>& rec, const PreferenceVector& mean,
                           double d0) {
  if (rec.size() < 2) return false;
  for (const auto& r : rec)
    if (angular_distance(r.s, mean) > d0) return false;
  const std::size_t half = rec.size() / 2;
  double newer = 0.0, older = 0.0;
  for (std::size_t i = 0; i < half; ++i) newer += rec[i].reward;
  for (std::size_t i = rec.size() - half; i < rec.size(); ++i) older += rec[i].reward;
  return newer >= older;
}

}  // namespace

Calibration calibrate(const PreferenceVector& s_pred, const ContextMemory& memory,
                      const CalibrationConfig& cfg) {
  if (!cfg.enabled || memory.empty()) return {s_pred, 1.0, CalibrationMode::kIdentity};
  const auto rec = memory.recent(cfg.k);
  const PreferenceVector mean = memory.mean_recent(cfg.k);
  const double d = angular_distance(s_pred, mean);
  if (d <= cfg.d0) {
    const bool confident = consistent_and_rising(rec, mean, cfg.d0);
    return {s_pred, 1.0, confident ? CalibrationMode::kConfident : CalibrationMode::kAgrees};
  }
  const double iota = calibration_factor(d, cfg);
  Weights w{};
  for (std::size_t i = 0; i < kPrefDim; ++i) w[i] = iota * s_pred[i] + (1.0 - iota) * mean[i];
  return {PreferenceVector::project(w), iota, CalibrationMode::kShrunk};
}

// ---------------------------------------------------------------------------

namespace {

double best_high(double v, double lo, double hi) {
  if (!(hi > lo)) return 1.0;
  return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}
double best_low(double v, double lo, double hi) {
  if (!(hi > lo)) return 1.0;
  return std::clamp((hi - v) / (hi - lo), 0.0, 1.0);
}
double unit(double v, double lo, double hi) {
  if (!(hi > lo)) return 0.0;
  return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

}  // namespace

FactorNormalizer::FactorNormalizer(const qoe::Scenario& sc) {
  const auto& net = sc.network;
  const int n = net.size();
  if (n == 0) throw StructuralError("scenario without agents");
  constexpr double inf = std::numeric_limits<double>::infinity();
  cap_min = lat_min = crash_min = obs_min = fail_min = inf;
  cap_max = lat_max = crash_max = obs_max = fail_max = -inf;
  for (int i = 0; i < n; ++i) {
    const auto& a = net.agent(i);
    capability.push_back(qoe::agent_capability(net, i));
    latency.push_back(qoe::agent_latency(sc.arrival_rate, a.service_rate, a.service_time_std).latency);
    crash.push_back(a.crash_rate());
    cap_min = std::min(cap_min, capability.back());
    cap_max = std::max(cap_max, capability.back());
    lat_min = std::min(lat_min, latency.back());
    lat_max = std::max(lat_max, latency.back());
    crash_min = std::min(crash_min, crash.back());
    crash_max = std::max(crash_max, crash.back());
    obs_min = std::min(obs_min, static_cast<double>(a.observations));
    obs_max = std::max(obs_max, static_cast<double>(a.observations));
    fail_min = std::min(fail_min, static_cast<double>(a.failures));
    fail_max = std::max(fail_max, static_cast<double>(a.failures));
  }
  ber_min = net.links().empty() ? 0.0 : inf;
  ber_max = net.links().empty() ? 0.0 : -inf;
  for (const auto& l : net.links()) {
    ber_min = std::min(ber_min, l.mean_ber);
    ber_max = std::max(ber_max, l.mean_ber);
  }
}

double FactorNormalizer::norm_ber(double ber) const { return best_low(ber, ber_min, ber_max); }

Weights FactorNormalizer::factors(int i, double ber) const {
  const auto k = static_cast<std::size_t>(i);
  return {best_high(capability.at(k), cap_min, cap_max), norm_ber(ber),
          best_low(latency.at(k), lat_min, lat_max), best_low(crash.at(k), crash_min, crash_max)};
}

// ---------------------------------------------------------------------------

Environment::Environment(qoe::Scenario scenario, std::vector<ElamProfile> elams, EnvConfig config)
    : scenario_(std::move(scenario)),
      elams_(std::move(elams)),
      config_(config),
      norm_(scenario_),
      memory_(config.calibration.memory_size) {
  if (elams_.empty()) throw ConfigError("at least one E-LAM is required");
  for (const auto& e : elams_) {
    if (!e.translator) throw ConfigError("E-LAM '" + e.name + "' has no translator");
    if (!(e.fee >= 0.0) || !std::isfinite(e.fee)) throw ConfigError("E-LAM fee must be finite and >= 0");
  }
  const auto& cal = config_.calibration;
  if (cal.k < 1 || !(cal.d0 >= 0.0) || !(cal.d1 > cal.d0) || !(cal.iota_min >= 0.0 && cal.iota_min <= 1.0))
    throw ConfigError("bad calibration settings");
  const int n = num_agents();
  if (chain_length() < 1 || chain_length() > n) throw ConfigError("bad chain length");
  nn::Matrix adj(n, n);
  for (const auto& l : scenario_.network.links()) adj(l.a, l.b) = adj(l.b, l.a) = 1.0;
  norm_adj_ = nn::normalized_adjacency(adj);
  base_x_ = nn::Matrix(n, kNodeFeatures);
  for (int i = 0; i < n; ++i) {
    const auto& a = scenario_.network.agent(i);
    base_x_(i, 0) = unit(norm_.capability[static_cast<std::size_t>(i)], norm_.cap_min, norm_.cap_max);
    base_x_(i, 1) = unit(norm_.latency[static_cast<std::size_t>(i)], norm_.lat_min, norm_.lat_max);
    base_x_(i, 2) = unit(static_cast<double>(a.observations), norm_.obs_min, norm_.obs_max);
    base_x_(i, 3) = unit(static_cast<double>(a.failures), norm_.fail_min, norm_.fail_max);
    base_x_(i, 4) = best_low(norm_.crash[static_cast<std::size_t>(i)], norm_.crash_min, norm_.crash_max);
  }
}

void Environment::begin(const IntentSample& user) {
  user_ = user;
  live_ = true;
  elam_ = -1;
  chain_.clear();
  selected_.assign(static_cast<std::size_t>(num_agents()), 0);
  summary_ = EpisodeSummary{};
  summary_.s_true = user.preference;
  if (num_elams() == 1) select_elam(0);
}

void Environment::select_elam(int k) {
  elam_ = k;
  const ElamProfile& e = elams_[static_cast<std::size_t>(k)];
  Calibration cal;
  if (translation_override_) {
    cal = {*translation_override_, 1.0, CalibrationMode::kIdentity};
  } else if (const auto s = e.translator->translate(user_.prompt)) {
    cal = calibrate(*s, memory_, config_.calibration);
  } else {
    const PreferenceVector fallback =
        memory_.empty() ? PreferenceVector::even() : memory_.mean_recent(config_.calibration.k);
    cal = {fallback, 0.0, CalibrationMode::kRecovered};
  }
  summary_.elam = k;
  summary_.fee = fees_on_ ? e.fee : 0.0;
  summary_.s_translated = cal.s;
  summary_.s_used = override_ ? *override_ : cal.s;
  summary_.iota = cal.iota;
  summary_.calibration = cal.mode;
}

std::vector<std::uint8_t> Environment::valid_actions() const {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(num_actions()), 0);
  if (!live_) return mask;
  if (elam_ < 0) {
    for (int k = 0; k < num_elams(); ++k) mask[static_cast<std::size_t>(num_agents() + k)] = 1;
    return mask;
  }
  if (chain_.empty() || !config_.graph_restricted) {
    for (int i = 0; i < num_agents(); ++i)
      if (!selected_[static_cast<std::size_t>(i)]) mask[static_cast<std::size_t>(i)] = 1;
    return mask;
  }
  for (int j : scenario_.network.neighbors(chain_.back()))
    if (!selected_[static_cast<std::size_t>(j)]) mask[static_cast<std::size_t>(j)] = 1;
  return mask;
}

Observation Environment::observe() const {
  Observation o;
  o.x = base_x_;
  for (int i : chain_) o.x(i, 5) = 1.0;
  const auto& req = scenario_.request.required_types;
  const std::size_t pos = chain_.size();
  for (int i = 0; i < num_agents(); ++i) {
    if (pos < req.size() && scenario_.network.agent(i).service_type == req[pos]) o.x(i, 7) = 1.0;
    if (chain_.empty()) o.x(i, 8) = 1.0;
  }
  if (!chain_.empty()) {
    o.x(chain_.back(), 6) = 1.0;
    for (int j : scenario_.network.neighbors(chain_.back()))
      o.x(j, 8) = norm_.norm_ber(*scenario_.network.link_ber(chain_.back(), j));
  }
  o.elam = elam_;
  o.has_s = elam_ >= 0;
  o.s = o.has_s ? summary_.s_used : PreferenceVector::even();
  o.step = elam_ < 0 ? 0 : static_cast<int>(chain_.size()) + 1;
  o.mask = valid_actions();
  return o;
}

double Environment::step_reward(int agent, int prev, int pos, const Weights& s) const {
  const auto& req = scenario_.request.required_types;
  const bool match = pos < static_cast<int>(req.size()) &&
                     scenario_.network.agent(agent).service_type == req[static_cast<std::size_t>(pos)];
  Weights f;
  if (prev < 0) {
    f = norm_.factors(agent, 0.0);
  } else if (const auto ber = scenario_.network.link_ber(prev, agent)) {
    f = norm_.factors(agent, *ber);
  } else {
    f = norm_.factors(agent, 0.0);
    f[1] = 0.0;  // no link: worst information-loss score
  }
  double r = match ? config_.delta : -config_.delta;
  for (std::size_t i = 0; i < kPrefDim; ++i) r += s[i] * f[i];
  return r;
}

double Environment::episode_bonus(const std::vector<int>& chain, const Weights& s, double fee,
                                  std::optional<qoe::QoEBreakdown>* breakdown, bool* feasible) const {
  if (breakdown) breakdown->reset();
  if (feasible) *feasible = false;
  const qoe::GenSFC sfc{chain, scenario_.arrival_rate};
  try {
    qoe::validate_chain(scenario_.network, sfc);
    const qoe::QoEBreakdown b = qoe::evaluate_chain(scenario_.network, sfc, scenario_.request);
    if (breakdown) *breakdown = b;
    if (!b.feasible.all()) return -config_.fail_penalty;
    if (feasible) *feasible = true;
    return qoe::subjective_episode_reward(b, s, scenario_.request.capability_threshold, fee);
  } catch (const StructuralError&) {
    return -config_.fail_penalty;
  } catch (const StabilityError&) {
    return -config_.fail_penalty;
  }
}

void Environment::finish(bool dead_end) {
  live_ = false;
  summary_.chain = chain_;
  summary_.dead_end = dead_end;
  if (dead_end) {
    summary_.reward_episode = summary_.reward_gt = -config_.fail_penalty;
    summary_.feasible = false;
  } else {
    bool feasible = false;
    summary_.reward_episode = episode_bonus(chain_, summary_.s_translated.weights(), summary_.fee,
                                            &summary_.breakdown, &feasible);
    summary_.reward_gt = episode_bonus(chain_, summary_.s_true.weights(), summary_.fee);
    summary_.feasible = feasible;
  }
  summary_.return_episode += summary_.reward_episode;
  summary_.return_gt += summary_.reward_gt;
}

double Environment::step(int action) {
  if (!live_) throw ContractViolation("step on a finished episode");
  const auto mask = valid_actions();
  if (action < 0 || action >= num_actions() || !mask[static_cast<std::size_t>(action)])
    throw ContractViolation("action " + std::to_string(action) + " is masked");
  if (action >= num_agents()) {
    select_elam(action - num_agents());
    return 0.0;
  }
  const int pos = static_cast<int>(chain_.size());
  const int prev = chain_.empty() ? -1 : chain_.back();
  const double r_used = step_reward(action, prev, pos, summary_.s_used.weights());
  summary_.return_episode += step_reward(action, prev, pos, summary_.s_translated.weights());
  summary_.return_gt += step_reward(action, prev, pos, summary_.s_true.weights());
  chain_.push_back(action);
  selected_[static_cast<std::size_t>(action)] = 1;
  double r = r_used;
  bool dead_end = false;
  if (static_cast<int>(chain_.size()) == chain_length()) {
    finish(false);
  } else {
    const auto next = valid_actions();
    if (std::none_of(next.begin(), next.end(), [](std::uint8_t m) { return m != 0; })) {
      finish(true);
      dead_end = true;
    }
  }
  if (!live_) {
    const double bonus = dead_end || !override_
                             ? summary_.reward_episode
                             : episode_bonus(chain_, summary_.s_used.weights(), summary_.fee);
    r += bonus;
  }
  summary_.return_used += r;
  return r;
}

void Environment::remember() {
  if (live_) throw ContractViolation("remember() before the episode finished");
  memory_.push({user_.prompt.text, summary_.s_translated, summary_.reward_episode});
}

}  // namespace gensfc::srl
