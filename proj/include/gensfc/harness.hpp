#pragma once

// Experiment plumbing: scenario and intent generation, the E-LAM market,
// the exhaustive-search optimum, run orchestration and summaries.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gensfc/distill.hpp"
#include "gensfc/intent.hpp"
#include "gensfc/scenario_io.hpp"
#include "gensfc/srl.hpp"

namespace gensfc::harness {

// ---------------------------------------------------------------------------
// Scenario generation

struct ScenarioConfig {
  int n_agents = 81;
  int n_types = 4;
  std::vector<int> required_types{1, 2, 3};
  std::string topology = "er";  // "er" or "complete"
  double edge_prob = 0.15;
  int max_retries = 1000;
  double budget_min = 1e19, budget_max = 1e23;  // log-uniform
  double mu_min = 1.0, mu_max = 10.0;
  double sigma_factor = 2.0;  // sigma ~ U[0, sigma_factor / mu]
  // 0: service rate independent of compute budget. 1: the rate falls
  // linearly from mu_max to mu_min with the budget's log-quantile.
  double coupling = 0.0;
  double crash_max = 0.1;
  double ber_max = 0.05;
  std::int64_t observations = 1000;  // crash rate = failures / observations
  double arrival_rate = 0.8;
  double capability_threshold = 0.01;
  double max_latency = 10.0;
};

ScenarioConfig scenario_config_from_json(std::string_view text);
std::string scenario_config_to_json(const ScenarioConfig& c);
// Deterministic in (config, seed). Throws ConfigError when no connected
// topology is found within max_retries.
qoe::Scenario generate_scenario(const ScenarioConfig& config, std::uint64_t seed);
bool is_connected(const qoe::AgenticNetwork& net);

// ---------------------------------------------------------------------------
// Intent datasets

struct IntentCounts {
  int demo = 10;
  int test = 200;
  int train = 500;
  int history_per_app = 100;
  int contrastive_k = 4;
  int prompt_pool = 400;
};

struct AppSplit {
  int application_id = 1;
  std::vector<intent::IntentSample> demo;   // teacher labels
  std::vector<intent::IntentSample> test;   // noise-free teacher labels
  std::vector<intent::IoKDSample> train;    // augmented, disjoint from test
};

// One split per configured application, in configuration order.
std::vector<AppSplit> generate_intents(const intent::IntentConfig& config, const IntentCounts& counts,
                                       std::uint64_t seed);
void save_intents(const std::filesystem::path& dir, std::span<const AppSplit> splits);

// ---------------------------------------------------------------------------
// E-LAM market

struct ElamSpec {
  std::string name;
  std::string kind = "student";  // "student" or "even"
  distill::StudentProfile profile = distill::StudentProfile::kSmall;
  std::optional<double> fee;     // default: fee_per_width * hidden width, 0 for "even"
};

struct MarketConfig {
  std::vector<ElamSpec> elams{{"small", "student", distill::StudentProfile::kSmall, std::nullopt},
                              {"large", "student", distill::StudentProfile::kLarge, std::nullopt},
                              {"even", "even", distill::StudentProfile::kSmall, std::nullopt}};
  double fee_per_width = 0.001;
};

struct TrainedElam {
  ElamSpec spec;
  double fee = 0.0;
  std::optional<distill::DistillResult> distilled;
};

// Trains every student E-LAM on the union of the applications' train sets.
std::vector<TrainedElam> build_market(const MarketConfig& market, std::span<const AppSplit> splits,
                                      const distill::DistillConfig& distill_config);
std::vector<srl::ElamProfile> market_profiles(std::span<const TrainedElam> market, double p_min);

// ---------------------------------------------------------------------------
// Exhaustive optimum

struct BruteForceResult {
  std::vector<int> chain;
  int elam = -1;
  double reward = 0.0;
  std::size_t chains = 0;  // type-valid connected chains enumerated
};

// Enumerates every type-valid connected chain times every fee, scoring the
// terminal bonus under s (infeasible chains score -fail_penalty). Ties go to
// the lexicographically smallest chain, then the lowest E-LAM index. Throws
// SizeError beyond max_chains.
BruteForceResult brute_force_optimum(const qoe::Scenario& scenario, const PreferenceVector& s,
                                     std::span<const double> fees, double fail_penalty = 5.0,
                                     std::size_t max_chains = 1000000);

// ---------------------------------------------------------------------------
// Experiments

// Which users an experiment serves. With application 0 every application's
// source set is concatenated; otherwise the named application supplies the
// users and `contamination` of them come from the other applications.
struct PopulationConfig {
  std::string source = "test";  // "test" (noise-free labels) or "train"
  int application = 0;
  double contamination = 0.0;   // in [0, 1)
  int size = 0;                 // 0: every user of the application
};

struct ExperimentConfig {
  std::vector<std::string> variants{"srl", "random", "greedy", "even"};
  std::vector<std::uint64_t> seeds{1};
  int episodes = 2000;
  int final_window = 500;
  ScenarioConfig scenario;
  intent::IntentConfig intents = intent::default_intent_config();
  IntentCounts counts;
  distill::DistillConfig distill;
  MarketConfig market;
  srl::EnvConfig env;
  srl::SrlConfig srl;
  PopulationConfig population;
};

// Reads a JSON object whose sections override the defaults. Unknown keys and
// invalid values throw ConfigError.
ExperimentConfig experiment_config_from_json(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_to_json(const ExperimentConfig& c);

// Stable content hash (FNV-1a 64, hex) of the given byte strings.
std::string content_hash(std::span<const std::string> parts);
std::string file_bytes(const std::filesystem::path& path);

struct VariantStats {
  std::string variant;
  std::uint64_t seed = 0;
  int rows = 0;
  int window = 0;
  double reward_episode = 0.0;  // means over the final window
  double reward_gt = 0.0;
  double return_episode = 0.0;
  double return_gt = 0.0;
  double capability = 0.0;      // over window rows with a breakdown
  double feasible_rate = 0.0;
};

struct Aggregate {
  std::string variant;
  std::string metric;
  int seeds = 0;
  double mean = 0.0;
  double std = 0.0;  // sample std, 0 for a single seed
};

VariantStats window_stats(std::span<const srl::EpisodeRow> rows, int final_window);
std::vector<Aggregate> aggregate(std::span<const VariantStats> stats);

// Reads an episode log written by srl::write_episode_log.
std::vector<srl::EpisodeRow> read_episode_log(const std::filesystem::path& path);

struct Summary {
  std::string input_hash;  // config, master seed and scenario; empty when unknown
  std::string logs_hash;   // bytes of the episode logs
  std::vector<VariantStats> runs;
  std::vector<Aggregate> aggregates;
};
std::string summary_to_json(const Summary& s, const std::string& config_echo);
// Recomputes a summary from every *.csv episode log in `dir`, in name order.
// Logs are expected to be named "{variant}_seed{N}.csv". The input hash is
// taken from run.json when present.
Summary summarize_dir(const std::filesystem::path& dir, int final_window);

// ---------------------------------------------------------------------------
// Pipelines

std::vector<intent::IntentSample> served_users(std::span<const AppSplit> splits, const PopulationConfig& p);

// Everything an experiment arm reads. Scenario, intents and student seeds all
// derive from the master seed; arms differ only in their run seed.
struct Workspace {
  std::uint64_t master_seed = 0;
  qoe::Scenario scenario;
  std::vector<AppSplit> splits;
  std::vector<TrainedElam> market;
  std::vector<srl::ElamProfile> profiles;
  std::vector<intent::IntentSample> users;
};

struct WorkspaceOptions {
  // Students stored here under a matching content key are loaded instead of
  // retrained; newly trained students are written back. Empty: no cache.
  std::filesystem::path student_cache;
  std::optional<qoe::Scenario> scenario;  // replaces the generated scenario
};

Workspace build_workspace(const ExperimentConfig& c, std::uint64_t master_seed, const WorkspaceOptions& options = {});

// Key under which a student is cached: its distillation settings, seed and
// training data.
std::string student_key(const ElamSpec& spec, const distill::DistillConfig& dc,
                        std::span<const intent::IoKDSample> train);

struct ArmResult {
  srl::Variant variant = srl::Variant::kSRL;
  std::uint64_t seed = 0;
  std::vector<srl::EpisodeRow> rows;
  std::optional<srl::PolicyNet> policy;  // learned variants only
};

ArmResult run_arm(const Workspace& ws, const ExperimentConfig& c, srl::Variant variant, std::uint64_t seed);

std::string log_name(srl::Variant variant, std::uint64_t seed);     // "{variant}_seed{N}.csv"
std::string policy_name(srl::Variant variant, std::uint64_t seed);  // "{variant}_seed{N}.policy.json"

// Runs every (variant, seed) arm of `c`, writing the episode logs, policy
// checkpoints, run.json (config echo, master seed, input hash, population
// mean) and summary.json into `out`.
Summary run_experiment(const Workspace& ws, const ExperimentConfig& c, const std::filesystem::path& out);

std::string input_hash(const ExperimentConfig& c, const Workspace& ws);

// Per-user greedy decode of a trained policy with the full deployment path
// (translation, calibration, fees).
struct EvalRow {
  int user = 0;
  int application_id = 0;
  srl::EpisodeSummary summary;
};
std::vector<EvalRow> evaluate_policy(const Workspace& ws, const ExperimentConfig& c, const srl::PolicyNet& policy,
                                     std::span<const intent::IntentSample> users);
void write_eval_log(const std::filesystem::path& path, std::span<const EvalRow> rows);

void write_match_log(const std::filesystem::path& path, std::span<const intent::IntentSample> users,
                     const srl::MatchResult& m);

}  // namespace gensfc::harness
