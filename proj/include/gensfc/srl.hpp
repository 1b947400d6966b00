#pragma once

// Chain composition as an MDP: the environment (E-LAM selection, intent
// translation and calibration, node-by-node chain building), the graph
// actor-critic policy, advantage estimation, PPO/REINFORCE updates, the
// Random/Greedy baselines and the training loop.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gensfc/distill.hpp"
#include "gensfc/intent.hpp"
#include "gensfc/nn.hpp"
#include "gensfc/preference.hpp"
#include "gensfc/qoe.hpp"
#include "gensfc/rng.hpp"
#include "gensfc/scenario_io.hpp"

namespace gensfc::srl {

using intent::IntentSample;

// ---------------------------------------------------------------------------
// E-LAMs

// Maps a prompt to a preference vector, or nullopt on failure.
class Translator {
 public:
  virtual ~Translator() = default;
  virtual std::optional<PreferenceVector> translate(const intent::Prompt& prompt) const = 0;
  virtual std::string kind() const = 0;
};

// A distilled student. Predictions are memoised by prompt text.
class StudentTranslator : public Translator {
 public:
  StudentTranslator(distill::StudentModel model, double p_min);
  std::optional<PreferenceVector> translate(const intent::Prompt& prompt) const override;
  std::string kind() const override { return "student"; }
  const distill::StudentModel& model() const { return model_; }

 private:
  distill::StudentModel model_;
  double p_min_;
  mutable std::unordered_map<std::string, std::optional<PreferenceVector>> cache_;
};

// Returns the same vector for every prompt (the even stub).
class ConstantTranslator : public Translator {
 public:
  explicit ConstantTranslator(PreferenceVector s) : s_(s) {}
  std::optional<PreferenceVector> translate(const intent::Prompt&) const override { return s_; }
  std::string kind() const override { return "constant"; }

 private:
  PreferenceVector s_;
};

// The teacher itself; used in tests and as an upper reference.
class OracleTranslator : public Translator {
 public:
  explicit OracleTranslator(intent::TeacherOracle oracle) : oracle_(std::move(oracle)) {}
  std::optional<PreferenceVector> translate(const intent::Prompt& p) const override {
    return oracle_.translate(p);
  }
  std::string kind() const override { return "oracle"; }

 private:
  intent::TeacherOracle oracle_;
};

struct ElamProfile {
  int id = 0;
  std::string name;
  double fee = 0.0;
  std::shared_ptr<const Translator> translator;
};

// ---------------------------------------------------------------------------
// In-context memory and calibration

struct MemoryRecord {
  std::string prompt;
  PreferenceVector s = PreferenceVector::even();
  double reward = 0.0;
};

class ContextMemory {
 public:
  explicit ContextMemory(int capacity = 64);
  void push(MemoryRecord r);
  int size() const { return static_cast<int>(records_.size()); }
  int capacity() const { return capacity_; }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }
  // Up to k most recent records, newest first.
  std::vector<MemoryRecord> recent(int k) const;
  // Re-projected mean of the k most recent vectors. Requires a non-empty memory.
  PreferenceVector mean_recent(int k) const;

 private:
  int capacity_;
  std::deque<MemoryRecord> records_;
};

struct CalibrationConfig {
  bool enabled = true;
  int memory_size = 64;
  int k = 8;
  double d0 = 0.1;
  double d1 = 0.4;
  double iota_min = 0.3;
};

enum class CalibrationMode {
  kIdentity,    // disabled or empty memory
  kConfident,   // consistent memory, rising rewards, prediction agrees
  kAgrees,      // prediction within d0 of the recent mean
  kShrunk,      // blended toward the recent mean
  kRecovered,   // translator failed; fell back to the recent mean
};
std::string to_string(CalibrationMode m);

struct Calibration {
  PreferenceVector s = PreferenceVector::even();
  double iota = 1.0;
  CalibrationMode mode = CalibrationMode::kIdentity;
};

// 1 up to d0, linear down to iota_min at d1, iota_min beyond.
double calibration_factor(double distance, const CalibrationConfig& cfg);
Calibration calibrate(const PreferenceVector& s_pred, const ContextMemory& memory,
                      const CalibrationConfig& cfg);

// ---------------------------------------------------------------------------
// Environment

struct EnvConfig {
  double delta = 1.0;          // type-match flag reward
  double fail_penalty = 5.0;   // dead ends and infeasible chains
  bool graph_restricted = true;
  CalibrationConfig calibration;
};

// Per-node features: min-max C, L, |O|, |F|, the oriented crash score, the
// selected and last flags, whether the agent's type fits the next slot, and
// the oriented BER of the hop from the last node (1 before the first node, 0
// when there is no link).
inline constexpr int kNodeFeatures = 9;

// Min-max statistics over the agent population, fixed per scenario. Every
// I(.) value is oriented so that 1 is best.
struct FactorNormalizer {
  std::vector<double> capability;  // per agent, raw
  std::vector<double> latency;     // per agent at the scenario arrival rate
  std::vector<double> crash;
  double cap_min = 0, cap_max = 0, lat_min = 0, lat_max = 0, crash_min = 0, crash_max = 0;
  double ber_min = 0, ber_max = 0, obs_min = 0, obs_max = 0, fail_min = 0, fail_max = 0;

  explicit FactorNormalizer(const qoe::Scenario& scenario);
  FactorNormalizer() = default;
  // [I(C), I(BER), I(L), I(crash)] of agent i reached over a hop with `ber`.
  Weights factors(int agent, double ber) const;
  double norm_ber(double ber) const;
};

struct Observation {
  nn::Matrix x;                   // N x kNodeFeatures
  PreferenceVector s = PreferenceVector::even();
  bool has_s = false;             // false before the E-LAM decision
  int elam = -1;                  // -1 before the E-LAM decision
  int step = 0;                   // 0 = E-LAM decision, t = t-th node
  std::vector<std::uint8_t> mask; // N + K entries
};

struct EpisodeSummary {
  std::vector<int> chain;
  int elam = -1;
  double fee = 0.0;
  PreferenceVector s_translated = PreferenceVector::even();
  PreferenceVector s_used = PreferenceVector::even();  // state and reward vector
  PreferenceVector s_true = PreferenceVector::even();
  double iota = 1.0;
  CalibrationMode calibration = CalibrationMode::kIdentity;
  bool dead_end = false;
  bool feasible = false;
  std::optional<qoe::QoEBreakdown> breakdown;
  double reward_episode = 0.0;  // terminal bonus under s_translated
  double reward_gt = 0.0;       // terminal bonus under s_true
  double return_episode = 0.0;  // step rewards plus bonus under s_translated
  double return_gt = 0.0;
  double return_used = 0.0;     // what the learner saw
};

class Environment {
 public:
  Environment(qoe::Scenario scenario, std::vector<ElamProfile> elams, EnvConfig config = {});

  int num_agents() const { return scenario_.network.size(); }
  int num_elams() const { return static_cast<int>(elams_.size()); }
  int num_actions() const { return num_agents() + num_elams(); }
  int chain_length() const { return static_cast<int>(scenario_.request.required_types.size()); }
  const qoe::Scenario& scenario() const { return scenario_; }
  const std::vector<ElamProfile>& elams() const { return elams_; }
  const EnvConfig& config() const { return config_; }
  const FactorNormalizer& normalizer() const { return norm_; }
  const nn::Matrix& norm_adjacency() const { return norm_adj_; }
  ContextMemory& memory() { return memory_; }
  const ContextMemory& memory() const { return memory_; }

  // When set, this vector drives the state and the learner's reward instead
  // of the translated one (the Even-DRL baseline).
  void set_preference_override(std::optional<PreferenceVector> s) { override_ = s; }
  // When set, replaces the translator output (matching experiment).
  void set_translation_override(std::optional<PreferenceVector> s) { translation_override_ = s; }
  void set_fee_enabled(bool on) { fees_on_ = on; }

  // Starts an episode. With a single E-LAM the choice is made here.
  void begin(const IntentSample& user);
  bool awaiting_elam() const { return live_ && elam_ < 0; }
  bool done() const { return !live_; }
  Observation observe() const;
  std::vector<std::uint8_t> valid_actions() const;
  // Applies an action index (agent id, or num_agents() + E-LAM index).
  // Returns the learner's reward. Throws ContractViolation on masked actions.
  double step(int action);
  const EpisodeSummary& summary() const { return summary_; }
  // Adds the finished episode to the context memory.
  void remember();

  // r_step of appending `agent` after `prev` (-1 for the first node) at chain
  // position `pos`, under preference s.
  double step_reward(int agent, int prev, int pos, const Weights& s) const;
  // Terminal bonus of a full chain, or -fail_penalty when it is infeasible.
  double episode_bonus(const std::vector<int>& chain, const Weights& s, double fee,
                       std::optional<qoe::QoEBreakdown>* breakdown = nullptr,
                       bool* feasible = nullptr) const;

 private:
  void select_elam(int k);
  void finish(bool dead_end);

  qoe::Scenario scenario_;
  std::vector<ElamProfile> elams_;
  EnvConfig config_;
  FactorNormalizer norm_;
  nn::Matrix norm_adj_;
  nn::Matrix base_x_;
  ContextMemory memory_;
  std::optional<PreferenceVector> override_;
  std::optional<PreferenceVector> translation_override_;
  bool fees_on_ = true;

  IntentSample user_;
  bool live_ = false;
  int elam_ = -1;
  std::vector<int> chain_;
  std::vector<std::uint8_t> selected_;
  EpisodeSummary summary_;
};

// ---------------------------------------------------------------------------
// Policy

struct PolicyConfig {
  int gcn_hidden = 64;
  int gcn_layers = 2;
  int embed = 16;
  int head_hidden = 64;
};

class PolicyNet {
 public:
  PolicyNet(int n_agents, int n_elams, int chain_length, PolicyConfig config, std::uint64_t seed);

  int num_actions() const { return n_agents_ + n_elams_; }
  int n_agents() const { return n_agents_; }
  int n_elams() const { return n_elams_; }
  int chain_length() const { return chain_length_; }
  const PolicyConfig& config() const { return config_; }
  nn::ParamBundle& params() { return params_; }
  const nn::ParamBundle& params() const { return params_; }

  struct Forward {
    nn::GcnCache gcn;
    nn::Matrix h;        // GCN output, N x gcn_hidden
    nn::Matrix u;        // intent input
    nn::Matrix intent_pre;
    nn::Matrix model_pre;
    nn::Matrix z;        // 1 x latent
    nn::Matrix node_pre; // N x head_hidden, per-agent scoring layer
    nn::Matrix actor_pre, critic_pre;
    std::vector<double> logits;
    double value = 0.0;
    int elam_row = 0;
  };
  Forward forward(const nn::Matrix& norm_adj, const Observation& obs) const;
  // Accumulates parameter gradients for upstream d/dlogits and d/dvalue.
  void backward(const nn::Matrix& norm_adj, const Observation& obs, const Forward& f,
                std::span<const double> dlogits, double dvalue);
  // Latent vector only, for tests.
  nn::Matrix encode(const nn::Matrix& norm_adj, const Observation& obs) const;

  void save(const std::filesystem::path& path) const;
  static PolicyNet load(const std::filesystem::path& path);

 private:
  int n_agents_, n_elams_, chain_length_;
  PolicyConfig config_;
  std::uint64_t seed_;
  nn::ParamBundle params_;
};

// Log-softmax over the unmasked entries; masked entries get -infinity.
std::vector<double> masked_log_softmax(std::span<const double> logits,
                                       std::span<const std::uint8_t> mask);

struct ActResult {
  int action = -1;
  double logprob = 0.0;
  double value = 0.0;
};
// Samples from the masked policy, or takes the argmax (lowest index on ties)
// when greedy. Throws ContractViolation on an empty mask.
ActResult act(const PolicyNet& policy, const nn::Matrix& norm_adj, const Observation& obs,
              Rng& rng, bool greedy = false);

// ---------------------------------------------------------------------------
// Learning

struct Transition {
  Observation obs;
  int action = 0;
  double logprob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool terminal = false;
};

// GAE over one or more concatenated episodes; the value after a terminal
// transition is 0. Returns unnormalised advantages.
std::vector<double> gae(std::span<const Transition> traj, double gamma, double gae_lambda);
// Mean 0, std 1 (unchanged when the std is 0).
void normalize_advantages(std::vector<double>& adv);

enum class Algorithm { kPPO, kREINFORCE };
std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& name);

struct SrlConfig {
  Algorithm algorithm = Algorithm::kPPO;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  int ppo_epochs = 4;
  int minibatch = 8;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double learning_rate = 1e-3;
  double max_grad_norm = 1.0;
  int episodes_per_update = 8;
  PolicyConfig policy;
};

struct UpdateStats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  double first_epoch_max_ratio_dev = 0.0;  // max |ratio - 1| in epoch 1
};

// Loss of one minibatch and (optionally) its parameter gradients. The loss is
// -mean(clipped surrogate) + value_coef * mean(0.5 (V - R)^2) - entropy_coef * mean(H).
struct LossParts {
  double total = 0.0, actor = 0.0, critic = 0.0, entropy = 0.0, max_ratio_dev = 0.0;
};
LossParts ppo_loss(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition* const> batch,
                   std::span<const double> adv, std::span<const double> returns, const SrlConfig& cfg,
                   bool with_grad);
// -mean(log pi * A) + value and entropy terms as above.
LossParts reinforce_loss(PolicyNet& policy, const nn::Matrix& norm_adj,
                         std::span<const Transition* const> batch, std::span<const double> adv,
                         std::span<const double> returns, const SrlConfig& cfg, bool with_grad);

UpdateStats ppo_update(PolicyNet& policy, const nn::Matrix& norm_adj, std::span<const Transition> batch,
                       const SrlConfig& cfg, Rng& rng);
UpdateStats reinforce_update(PolicyNet& policy, const nn::Matrix& norm_adj,
                             std::span<const Transition> batch, const SrlConfig& cfg);

// ---------------------------------------------------------------------------
// Runs

enum class Variant { kSRL, kRandom, kGreedy, kEven };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);

struct EpisodeRow {
  int episode = 0;
  Variant variant = Variant::kSRL;
  std::uint64_t seed = 0;
  EpisodeSummary summary;
  double actor_loss = std::numeric_limits<double>::quiet_NaN();
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();
};

struct RunOptions {
  int episodes = 2000;
  std::uint64_t seed = 0;
  SrlConfig srl;
};

struct TrainResult {
  PolicyNet policy;
  std::vector<EpisodeRow> rows;
};

// Users are drawn uniformly (with replacement) from `users` each episode.
TrainResult train_srl(Environment& env, std::span<const IntentSample> users, const RunOptions& opt,
                      Variant variant = Variant::kSRL);
std::vector<EpisodeRow> run_random(Environment& env, std::span<const IntentSample> users,
                                   const RunOptions& opt);
std::vector<EpisodeRow> run_greedy(Environment& env, std::span<const IntentSample> users,
                                   const RunOptions& opt);

// Greedy choice among valid candidates for the dominant factor of s; ties by
// the second factor, then id. Type-correct candidates are preferred.
int greedy_node(const Environment& env, const std::vector<std::uint8_t>& mask, int prev, int pos,
                const PreferenceVector& s);

// Plays one episode with greedy decoding and returns its summary.
EpisodeSummary decode_greedy(const PolicyNet& policy, Environment& env, const IntentSample& user);

struct MatchResult {
  double fraction = 0.0;  // ties are settled by a seeded coin
  int users = 0;
  int ties = 0;
  std::vector<int> nearest;   // 0 or 1 per user
  std::vector<double> reward_a, reward_b;
};
// For each user, decodes both policies with the user's own vector fed as the
// translation, no fees, and scores the full return under that vector.
MatchResult policy_match_experiment(const PolicyNet& policy_a, const PolicyNet& policy_b,
                                    Environment& env, std::span<const IntentSample> users,
                                    const PreferenceVector& mean_a, const PreferenceVector& mean_b,
                                    std::uint64_t seed);

// CSV with the per-episode columns documented in the README.
void write_episode_log(const std::filesystem::path& path, std::span<const EpisodeRow> rows);
std::string episode_log_header();

}  // namespace gensfc::srl
