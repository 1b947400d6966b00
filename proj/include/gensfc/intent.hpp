#pragma once

// Synthetic intents: text embedding, the teacher oracle that labels prompts
// with preference vectors, and the distillation dataset pipeline.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gensfc/preference.hpp"

namespace gensfc::intent {

inline constexpr int kEmbedDim = 256;

// Lowercase, split on anything that is not [a-z0-9].
std::vector<std::string> tokenize(std::string_view text);

// Signed feature hashing of unigrams ("u:tok") and bigrams ("b:tok tok") into
// `dim` buckets with FNV-1a 64: bucket = h % dim, sign from the top bit.
// L2-normalised; empty token set gives the zero vector.
std::vector<double> embed(std::string_view text, int dim = kEmbedDim);

// 0 when either vector is all-zero.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct Prompt {
  std::string text;
  int application_id = 1;
  std::string annotation;  // free-form rationale, never interpreted
};

struct IntentSample {
  Prompt prompt;
  PreferenceVector preference = PreferenceVector::even();
};

struct IoKDSample {
  Prompt prompt;
  PreferenceVector preference = PreferenceVector::even();
  std::vector<PreferenceVector> contrastive;
};

struct KeywordClass {
  std::string name;
  std::vector<std::string> keywords;
  Weights shift{};
};

struct ApplicationProfile {
  int id = 1;
  std::string name;
  Weights base{};
  std::vector<std::string> openers;
  std::vector<std::string> tasks;
  std::map<std::string, double> keyword_prob;  // per keyword class
};

struct IntentConfig {
  double noise_scale = 0.05;
  // Fraction of prompts the teacher labels with an unrelated uniform draw.
  double outlier_rate = 0.0;
  std::vector<std::string> clause_templates;
  std::vector<KeywordClass> keyword_classes;
  std::vector<ApplicationProfile> applications;

  const ApplicationProfile& application(int id) const;
};

IntentConfig intent_config_from_json(const std::string& text);
IntentConfig load_intent_config(const std::filesystem::path& path);
// config/applications.json from the source tree.
IntentConfig default_intent_config();

// Stand-in for the cloud model that labels intents. Output is a pure function
// of (seed, application, text).
class TeacherOracle {
 public:
  TeacherOracle(IntentConfig config, std::uint64_t seed);

  PreferenceVector translate(const Prompt& prompt) const;
  // Base plus keyword shifts, projected, before noise.
  PreferenceVector clean(const Prompt& prompt) const;
  // Occurrences of each keyword class in the text, in config order.
  std::vector<int> keyword_counts(std::string_view text) const;

  const IntentConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

 private:
  IntentConfig config_;
  std::uint64_t seed_;
};

std::vector<Prompt> generate_prompts(const IntentConfig& config, int application_id, int count,
                                     std::uint64_t seed);

// Historical samples whose best similarity to any user prompt reaches tau_min.
std::vector<IntentSample> filter_relevant(const std::vector<IntentSample>& historical,
                                          const std::vector<IntentSample>& user, double tau_min);

// The k pool entries farthest (angular distance) from `sample_pref`, farthest
// first, ties by pool index. Throws SizeError when the pool has fewer than k.
std::vector<PreferenceVector> topk_contrastive(const PreferenceVector& sample_pref,
                                               const std::vector<PreferenceVector>& pool, int k);

// demo plus n_aug teacher-labelled prompts whose keywords are limited to the
// ones seen in the demo texts.
std::vector<IntentSample> augment(const std::vector<IntentSample>& demo, int n_aug,
                                  const TeacherOracle& oracle, std::uint64_t seed);

// Augments the demo set and attaches k contrastive vectors per sample from the
// historical preferences. Pool entries equal to the positive are skipped.
std::vector<IoKDSample> build_iokd_dataset(const std::vector<IntentSample>& demo,
                                           const std::vector<IntentSample>& historical, int n_aug,
                                           int k, const TeacherOracle& oracle, std::uint64_t seed);

PreferenceVector mean_preference(std::span<const IntentSample> samples);
PreferenceVector mean_preference(std::span<const IoKDSample> samples);

std::vector<IntentSample> label_prompts(const std::vector<Prompt>& prompts,
                                        const TeacherOracle& oracle);

// JSON Lines with fields text, application_id, preference, contrastive,
// annotation. Intent-only samples are written with an empty contrastive list.
void save_dataset(const std::filesystem::path& path, std::span<const IoKDSample> samples);
void save_dataset(const std::filesystem::path& path, std::span<const IntentSample> samples);
std::vector<IoKDSample> load_dataset(const std::filesystem::path& path);
std::string dataset_record_json(const IoKDSample& s);

std::vector<IntentSample> to_intent_samples(std::span<const IoKDSample> samples);

}  // namespace gensfc::intent
