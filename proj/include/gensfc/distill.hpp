#pragma once

// Edge intent translator (student) and the pairwise preference distillation
// that trains it, plus the MAE/MSE/failure-rate metrics.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gensfc/intent.hpp"
#include "gensfc/nn.hpp"
#include "gensfc/preference.hpp"

namespace gensfc::distill {

// All simplex points whose coordinates are multiples of `step`, floored via
// PreferenceVector::project. step = 0.05 gives 1771 entries.
class PreferenceVocab {
 public:
  explicit PreferenceVocab(double step = 0.05);

  std::size_t size() const { return entries_.size(); }
  double step() const { return step_; }
  const PreferenceVector& entry(std::size_t i) const { return entries_.at(i); }
  // Nearest entry in Euclidean distance; ties go to the lowest index.
  int snap(const PreferenceVector& s) const;
  int snap(const Weights& w) const;

 private:
  double step_;
  std::vector<PreferenceVector> entries_;
};

enum class StudentProfile { kSmall, kLarge };
int hidden_width(StudentProfile p);  // 32 / 128
std::string to_string(StudentProfile p);
StudentProfile profile_from_string(const std::string& name);

// Sparse view of an embedding: (index, value) for the non-zero buckets.
using SparseVec = std::vector<std::pair<int, double>>;
SparseVec sparse_embed(std::string_view text, int dim = intent::kEmbedDim);

// Output head. kFree: one logit per vocabulary entry. kFactorized: the
// logits factor through fixed quadratic features of the entries,
// logit_j = (hidden W2 + b2) . phi(entry_j), phi being the 4 coordinates and
// their 10 pairwise products, so nearby entries share evidence.
enum class HeadKind { kFree, kFactorized };
std::string to_string(HeadKind h);
HeadKind head_from_string(const std::string& name);

// embed(text) -> dense(h) -> relu -> head -> |vocab| logits.
class StudentModel {
 public:
  static constexpr int kQuadraticDim = 14;

  StudentModel(int hidden, double vocab_step, std::uint64_t seed,
               int embed_dim = intent::kEmbedDim, HeadKind head = HeadKind::kFree);

  int hidden() const { return hidden_; }
  int embed_dim() const { return embed_dim_; }
  std::uint64_t seed() const { return seed_; }
  HeadKind head() const { return head_; }
  int feature_dim() const { return feature_dim_; }
  const PreferenceVocab& vocab() const { return vocab_; }
  nn::ParamBundle& params() { return params_; }
  const nn::ParamBundle& params() const { return params_; }
  // dhead += g * d logit_j / d head.
  void add_entry_grad(std::span<double> dhead, int j, double g) const;

  struct Activation {
    SparseVec x;
    std::vector<double> pre;     // before relu
    std::vector<double> hidden;  // after relu
    std::vector<double> head;    // hidden W2 + b2
  };
  Activation encode(const SparseVec& x) const;
  double logit(const Activation& a, int j) const;
  std::vector<double> logits(const Activation& a) const;
  std::vector<double> logits(std::string_view text) const;
  // Adds the parameter gradient of sum_q dhead_q * head_q.
  void backward_head(const Activation& a, std::span<const double> dhead);
  // Adds g * d logit_j / d theta into the parameter gradients.
  void backward_logit(const Activation& a, int j, double g);
  // Adds the gradient of sum_j g_j logit_j for a dense upstream vector.
  void backward_logits(const Activation& a, std::span<const double> g);

 private:
  int hidden_;
  int embed_dim_;
  std::uint64_t seed_;
  HeadKind head_;
  PreferenceVocab vocab_;
  int feature_dim_;
  std::vector<double> phi_;  // |vocab| x kQuadraticDim, factorized head only
  nn::ParamBundle params_;
};

// log pi(s | prompt) at the vocabulary entry s snaps to.
double policy_logprob(const StudentModel& model, std::string_view text, const PreferenceVector& s);

// beta_base * (1 - scale_factor * angular_distance(s_p, s_bar)), at least
// 0.05 * beta_base.
double dynamic_beta(const PreferenceVector& s_p, const PreferenceVector& s_bar, double beta_base,
                    double scale_factor);

struct DistillConfig {
  double beta_base = 0.5;
  double scale_factor = 1.0;
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 16;
  double p_min = -1.0;  // negative: 2 / |vocab|
  std::uint64_t seed = 0;
  StudentProfile profile = StudentProfile::kSmall;
  double vocab_step = 0.05;
  // Supervised cross-entropy epochs run before the reference is frozen.
  int warm_start_epochs = 10;
  HeadKind head = HeadKind::kFree;

  double resolved_p_min(std::size_t vocab_size) const {
    return p_min < 0.0 ? 2.0 / static_cast<double>(vocab_size) : p_min;
  }
};

struct LossResult {
  double loss = 0.0;
  int pairs = 0;
  int skipped = 0;  // positive and contrastive snapped to the same entry
  double mean_beta = 0.0;
};

// Mean of -log sigmoid(margin) over all (sample, contrastive) pairs. The
// parameter gradients of `model` are overwritten with the analytic gradient.
LossResult iokd_loss(StudentModel& model, const StudentModel& reference,
                     std::span<const intent::IoKDSample> batch, const PreferenceVector& s_bar,
                     const DistillConfig& config);

// The margin of one pair, exposed for tests.
double iokd_margin(const StudentModel& model, const StudentModel& reference, std::string_view text,
                   const PreferenceVector& s_p, const PreferenceVector& s_c, double beta);

struct DistillMetrics {
  double mae = 0.0;
  double mse = 0.0;
  double failure_rate = 0.0;
  int count = 0;
};

struct EpochLog {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  double failure_rate = 0.0;
  double mean_beta = 0.0;
};

struct DistillResult {
  StudentModel model;
  StudentModel reference;
  PreferenceVector s_bar;
  std::vector<EpochLog> log;
  int skipped_pairs = 0;
};

// Throws TrainingError (with the epoch) if the loss goes non-finite. The
// warm start, when enabled, fits warm_start_set (or the positives of `train`
// when empty) by cross-entropy before the reference is frozen.
DistillResult train_distill(std::span<const intent::IoKDSample> train, const DistillConfig& config,
                            std::span<const intent::IntentSample> eval_set = {},
                            std::span<const intent::IntentSample> warm_start_set = {});

// Argmax vocabulary entry, or nullopt when its probability is below p_min.
std::optional<PreferenceVector> predict(const StudentModel& model, std::string_view text,
                                        double p_min);

// Component-wise MAE/MSE over non-failed predictions; 0 when every one failed.
DistillMetrics evaluate(const StudentModel& model, std::span<const intent::IntentSample> test,
                        double p_min);
DistillMetrics metrics_for_constant(const PreferenceVector& s,
                                    std::span<const intent::IntentSample> test);
DistillMetrics even_baseline_metrics(std::span<const intent::IntentSample> test);

void save_student(const StudentModel& model, const std::filesystem::path& path);
StudentModel load_student(const std::filesystem::path& path);

void write_training_log(const std::filesystem::path& path, std::span<const EpochLog> log);

}  // namespace gensfc::distill
