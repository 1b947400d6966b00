#include "gensfc/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"
#include "json.hpp"

namespace gensfc::distill {

using intent::IntentSample;
using intent::IoKDSample;

PreferenceVocab::PreferenceVocab(double step) : step_(step) {
  if (!(step > 0.0 && step <= 1.0)) throw DomainError("vocab step must be in (0, 1]");
  const double m_real = 1.0 / step;
  const int m = static_cast<int>(std::lround(m_real));
  if (std::abs(m_real - m) > 1e-9) throw DomainError("vocab step must divide 1");
  for (int a = 0; a <= m; ++a)
    for (int b = 0; b <= m - a; ++b)
      for (int c = 0; c <= m - a - b; ++c) {
        const int d = m - a - b - c;
        entries_.push_back(PreferenceVector::project(
            {static_cast<double>(a) / m, static_cast<double>(b) / m, static_cast<double>(c) / m,
             static_cast<double>(d) / m}));
      }
}

int PreferenceVocab::snap(const Weights& w) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    double d = 0.0;
    for (std::size_t k = 0; k < kPrefDim; ++k) {
      const double diff = entries_[i][k] - w[k];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

int PreferenceVocab::snap(const PreferenceVector& s) const { return snap(s.weights()); }

int hidden_width(StudentProfile p) { return p == StudentProfile::kSmall ? 32 : 128; }

std::string to_string(StudentProfile p) { return p == StudentProfile::kSmall ? "small" : "large"; }

StudentProfile profile_from_string(const std::string& name) {
  if (name == "small") return StudentProfile::kSmall;
  if (name == "large") return StudentProfile::kLarge;
  throw ConfigError("unknown student profile '" + name + "'");
}

SparseVec sparse_embed(std::string_view text, int dim) {
  const auto dense = intent::embed(text, dim);
  SparseVec out;
  for (int i = 0; i < dim; ++i)
    if (dense[static_cast<std::size_t>(i)] != 0.0) out.emplace_back(i, dense[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(HeadKind h) { return h == HeadKind::kFree ? "free" : "factorized"; }

HeadKind head_from_string(const std::string& name) {
  if (name == "free") return HeadKind::kFree;
  if (name == "factorized") return HeadKind::kFactorized;
  throw ConfigError("unknown student head '" + name + "'");
}

StudentModel::StudentModel(int hidden, double vocab_step, std::uint64_t seed, int embed_dim,
                           HeadKind head)
    : hidden_(hidden),
      embed_dim_(embed_dim),
      seed_(seed),
      head_(head),
      vocab_(vocab_step),
      feature_dim_(head == HeadKind::kFree ? static_cast<int>(vocab_.size()) : kQuadraticDim) {
  if (hidden < 1 || embed_dim < 1) throw DomainError("student dimensions must be positive");
  if (head == HeadKind::kFactorized) phi_.reserve(vocab_.size() * kQuadraticDim);
  for (std::size_t j = 0; head == HeadKind::kFactorized && j < vocab_.size(); ++j) {
    const Weights& e = vocab_.entry(j).weights();
    for (std::size_t i = 0; i < kPrefDim; ++i) phi_.push_back(e[i]);
    for (std::size_t i = 0; i < kPrefDim; ++i)
      for (std::size_t k = i; k < kPrefDim; ++k) phi_.push_back(e[i] * e[k]);
  }
  Rng rng(derive_seed(seed, "student.init"));
  params_.add("W1", nn::glorot_uniform(embed_dim, hidden, rng));
  params_.add("b1", nn::Matrix(1, hidden));
  // Zero head: the initial policy is uniform over the vocabulary.
  params_.add("W2", nn::Matrix(hidden, feature_dim_));
  params_.add("b2", nn::Matrix(1, feature_dim_));
}

void StudentModel::add_entry_grad(std::span<double> dhead, int j, double g) const {
  if (head_ == HeadKind::kFree) {
    dhead[static_cast<std::size_t>(j)] += g;
    return;
  }
  const double* f = phi_.data() + static_cast<std::size_t>(j) * kQuadraticDim;
  for (int q = 0; q < kQuadraticDim; ++q) dhead[static_cast<std::size_t>(q)] += g * f[q];
}

StudentModel::Activation StudentModel::encode(const SparseVec& x) const {
  const nn::Matrix& w1 = params_.value("W1");
  const nn::Matrix& b1 = params_.value("b1");
  const nn::Matrix& w2 = params_.value("W2");
  const nn::Matrix& b2 = params_.value("b2");
  Activation a;
  a.x = x;
  a.pre.assign(b1.values().begin(), b1.values().end());
  for (const auto& [i, xi] : x) {
    if (i < 0 || i >= embed_dim_) throw StructuralError("student: embedding index out of range");
    const auto row = w1.row_span(i);
    for (std::size_t k = 0; k < a.pre.size(); ++k) a.pre[k] += xi * row[k];
  }
  a.hidden.resize(a.pre.size());
  for (std::size_t k = 0; k < a.pre.size(); ++k) a.hidden[k] = a.pre[k] > 0.0 ? a.pre[k] : 0.0;
  a.head.assign(b2.values().begin(), b2.values().end());
  for (int k = 0; k < hidden_; ++k) {
    const double h = a.hidden[static_cast<std::size_t>(k)];
    if (h == 0.0) continue;
    const auto row = w2.row_span(k);
    for (int q = 0; q < feature_dim_; ++q) a.head[static_cast<std::size_t>(q)] += h * row[static_cast<std::size_t>(q)];
  }
  return a;
}

double StudentModel::logit(const Activation& a, int j) const {
  if (head_ == HeadKind::kFree) return a.head[static_cast<std::size_t>(j)];
  const double* f = phi_.data() + static_cast<std::size_t>(j) * kQuadraticDim;
  double z = 0.0;
  for (int q = 0; q < kQuadraticDim; ++q) z += a.head[static_cast<std::size_t>(q)] * f[q];
  return z;
}

std::vector<double> StudentModel::logits(const Activation& a) const {
  std::vector<double> z(vocab_.size());
  for (std::size_t j = 0; j < z.size(); ++j) z[j] = logit(a, static_cast<int>(j));
  return z;
}

std::vector<double> StudentModel::logits(std::string_view text) const {
  return logits(encode(sparse_embed(text, embed_dim_)));
}

void StudentModel::backward_head(const Activation& a, std::span<const double> dhead) {
  const nn::Matrix& w2 = params_.value("W2");
  nn::Matrix& gw2 = params_.grad("W2");
  nn::Matrix& gb2 = params_.grad("b2");
  nn::Matrix& gw1 = params_.grad("W1");
  nn::Matrix& gb1 = params_.grad("b1");
  for (int q = 0; q < feature_dim_; ++q) gb2[static_cast<std::size_t>(q)] += dhead[static_cast<std::size_t>(q)];
  std::vector<double> dpre(static_cast<std::size_t>(hidden_), 0.0);
  for (int k = 0; k < hidden_; ++k) {
    const auto wrow = w2.row_span(k);
    auto grow = gw2.row_span(k);
    const double h = a.hidden[static_cast<std::size_t>(k)];
    double dh = 0.0;
    for (int q = 0; q < feature_dim_; ++q) {
      if (dhead[static_cast<std::size_t>(q)] == 0.0) continue;
      grow[static_cast<std::size_t>(q)] += h * dhead[static_cast<std::size_t>(q)];
      dh += wrow[static_cast<std::size_t>(q)] * dhead[static_cast<std::size_t>(q)];
    }
    if (a.pre[static_cast<std::size_t>(k)] > 0.0) dpre[static_cast<std::size_t>(k)] = dh;
  }
  for (std::size_t k = 0; k < dpre.size(); ++k) gb1[k] += dpre[k];
  for (const auto& [i, xi] : a.x) {
    auto row = gw1.row_span(i);
    for (std::size_t k = 0; k < dpre.size(); ++k) row[k] += xi * dpre[k];
  }
}

void StudentModel::backward_logit(const Activation& a, int j, double g) {
  std::vector<double> dhead(static_cast<std::size_t>(feature_dim_), 0.0);
  add_entry_grad(dhead, j, g);
  backward_head(a, dhead);
}

void StudentModel::backward_logits(const Activation& a, std::span<const double> g) {
  if (g.size() != vocab_.size()) throw StructuralError("backward_logits: size mismatch");
  std::vector<double> dhead(static_cast<std::size_t>(feature_dim_), 0.0);
  for (std::size_t j = 0; j < g.size(); ++j)
    if (g[j] != 0.0) add_entry_grad(dhead, static_cast<int>(j), g[j]);
  backward_head(a, dhead);
}

double policy_logprob(const StudentModel& model, std::string_view text, const PreferenceVector& s) {
  const auto lp = nn::log_softmax(model.logits(text));
  return lp[static_cast<std::size_t>(model.vocab().snap(s))];
}

double dynamic_beta(const PreferenceVector& s_p, const PreferenceVector& s_bar, double beta_base,
                    double scale_factor) {
  const double beta = beta_base * (1.0 - scale_factor * angular_distance(s_p, s_bar));
  return std::max(beta, 0.05 * beta_base);
}

// ---------------------------------------------------------------------------

namespace {

// A sample with everything that does not change during training cached: the
// embedding, vocabulary indices, beta and the frozen reference logits.
struct Prepared {
  SparseVec x;
  int p = 0;
  std::vector<int> c;
  double beta = 0.0;
  double ref_p = 0.0;
  std::vector<double> ref_c;
};

Prepared prepare(const IoKDSample& s, const StudentModel& reference, const PreferenceVector& s_bar,
                 const DistillConfig& cfg, int& skipped) {
  const PreferenceVocab& vocab = reference.vocab();
  Prepared out;
  out.x = sparse_embed(s.prompt.text, reference.embed_dim());
  out.p = vocab.snap(s.preference);
  out.beta = dynamic_beta(s.preference, s_bar, cfg.beta_base, cfg.scale_factor);
  const auto act = reference.encode(out.x);
  out.ref_p = reference.logit(act, out.p);
  for (const auto& sc : s.contrastive) {
    const int c = vocab.snap(sc);
    if (c == out.p) {
      ++skipped;
      continue;
    }
    out.c.push_back(c);
    out.ref_c.push_back(reference.logit(act, c));
  }
  return out;
}

// -log sigmoid(m) without overflow.
double softplus_neg(double m) { return std::max(-m, 0.0) + std::log1p(std::exp(-std::abs(m))); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// The log-partition terms of pi_theta and pi_ref cancel in the margin, so
// only the logits of the positive and contrastive entries are needed.
LossResult loss_and_grad(StudentModel& model, std::span<const Prepared* const> batch) {
  LossResult r;
  for (const Prepared* s : batch) r.pairs += static_cast<int>(s->c.size());
  if (r.pairs == 0) return r;
  const double inv = 1.0 / r.pairs;
  double beta_sum = 0.0;
  std::vector<double> dhead;
  for (const Prepared* s : batch) {
    if (s->c.empty()) continue;
    const auto act = model.encode(s->x);
    const double dp = model.logit(act, s->p) - s->ref_p;
    dhead.assign(static_cast<std::size_t>(model.feature_dim()), 0.0);
    for (std::size_t k = 0; k < s->c.size(); ++k) {
      const double dc = model.logit(act, s->c[k]) - s->ref_c[k];
      const double margin = s->beta * (dp - dc);
      r.loss += softplus_neg(margin) * inv;
      const double g = -sigmoid(-margin) * inv * s->beta;  // d loss / d (z_p - z_c)
      model.add_entry_grad(dhead, s->p, g);
      model.add_entry_grad(dhead, s->c[k], -g);
      beta_sum += s->beta;
    }
    model.backward_head(act, dhead);
  }
  r.mean_beta = beta_sum * inv;
  return r;
}

}  // namespace

LossResult iokd_loss(StudentModel& model, const StudentModel& reference,
                     std::span<const IoKDSample> batch, const PreferenceVector& s_bar,
                     const DistillConfig& config) {
  if (batch.empty()) throw SizeError("iokd_loss: empty batch");
  int skipped = 0;
  std::vector<Prepared> prepared;
  prepared.reserve(batch.size());
  for (const auto& s : batch) {
    if (s.contrastive.empty()) throw SizeError("iokd_loss: sample without contrastive vectors");
    prepared.push_back(prepare(s, reference, s_bar, config, skipped));
  }
  std::vector<const Prepared*> ptrs;
  for (const auto& p : prepared) ptrs.push_back(&p);
  model.params().zero_grad();
  LossResult r = loss_and_grad(model, ptrs);
  r.skipped = skipped;
  return r;
}

double iokd_margin(const StudentModel& model, const StudentModel& reference, std::string_view text,
                   const PreferenceVector& s_p, const PreferenceVector& s_c, double beta) {
  return beta * ((policy_logprob(model, text, s_p) - policy_logprob(reference, text, s_p)) -
                 (policy_logprob(model, text, s_c) - policy_logprob(reference, text, s_c)));
}

// ---------------------------------------------------------------------------

std::optional<PreferenceVector> predict(const StudentModel& model, std::string_view text,
                                        double p_min) {
  const auto lp = nn::log_softmax(model.logits(text));
  const auto it = std::max_element(lp.begin(), lp.end());
  if (std::exp(*it) < p_min) return std::nullopt;
  return model.vocab().entry(static_cast<std::size_t>(it - lp.begin()));
}

namespace {

template <class Predictor>
DistillMetrics score(std::span<const IntentSample> test, Predictor&& predictor) {
  if (test.empty()) throw SizeError("evaluate: empty test set");
  DistillMetrics m;
  m.count = static_cast<int>(test.size());
  double abs_sum = 0.0, sq_sum = 0.0;
  int ok = 0, failed = 0;
  for (const auto& s : test) {
    const std::optional<PreferenceVector> pred = predictor(s);
    if (!pred) {
      ++failed;
      continue;
    }
    ++ok;
    for (std::size_t i = 0; i < kPrefDim; ++i) {
      const double d = (*pred)[i] - s.preference[i];
      abs_sum += std::abs(d);
      sq_sum += d * d;
    }
  }
  if (ok > 0) {
    m.mae = abs_sum / (kPrefDim * ok);
    m.mse = sq_sum / (kPrefDim * ok);
  }
  m.failure_rate = static_cast<double>(failed) / static_cast<double>(test.size());
  return m;
}

}  // namespace

DistillMetrics evaluate(const StudentModel& model, std::span<const IntentSample> test,
                        double p_min) {
  return score(test, [&](const IntentSample& s) { return predict(model, s.prompt.text, p_min); });
}

DistillMetrics metrics_for_constant(const PreferenceVector& c, std::span<const IntentSample> test) {
  return score(test, [&](const IntentSample&) { return std::optional<PreferenceVector>(c); });
}

DistillMetrics even_baseline_metrics(std::span<const IntentSample> test) {
  return metrics_for_constant(PreferenceVector::even(), test);
}

// ---------------------------------------------------------------------------

namespace {

void warm_start(StudentModel& model, std::span<const Prepared> data, const DistillConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "distill.warm_start"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> g;
  const std::size_t bs = static_cast<std::size_t>(std::max(cfg.batch_size, 1));
  for (int epoch = 0; epoch < cfg.warm_start_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      model.params().zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const Prepared& s = data[order[i]];
        const auto act = model.encode(s.x);
        nn::softmax_xent(model.logits(act), s.p, &g);
        for (double& x : g) x /= static_cast<double>(end - start);
        model.backward_logits(act, g);
      }
      model.params().adam_step({.lr = cfg.learning_rate});
    }
  }
  model.params().reset_optimizer();
}

}  // namespace

DistillResult train_distill(std::span<const IoKDSample> train, const DistillConfig& config,
                            std::span<const IntentSample> eval_set,
                            std::span<const IntentSample> warm_start_set) {
  if (train.empty()) throw SizeError("train_distill: empty dataset");
  if (!(config.beta_base > 0.0)) throw ConfigError("beta_base must be positive");
  if (config.epochs < 0 || config.batch_size < 1) throw ConfigError("bad epochs or batch size");

  StudentModel model(hidden_width(config.profile), config.vocab_step,
                     derive_seed(config.seed, "distill.student"), intent::kEmbedDim, config.head);
  const PreferenceVector s_bar = intent::mean_preference(train);
  const double p_min = config.resolved_p_min(model.vocab().size());

  int skipped = 0;
  if (config.warm_start_epochs > 0) {
    std::vector<Prepared> plain;
    int dummy = 0;
    if (warm_start_set.empty()) {
      for (const auto& s : train) plain.push_back(prepare(s, model, s_bar, config, dummy));
    } else {
      for (const auto& s : warm_start_set)
        plain.push_back(prepare({s.prompt, s.preference, {}}, model, s_bar, config, dummy));
    }
    warm_start(model, plain, config);
  }
  const StudentModel reference = model;

  std::vector<Prepared> data;
  data.reserve(train.size());
  for (const auto& s : train) {
    if (s.contrastive.empty()) throw SizeError("train_distill: sample without contrastive vectors");
    data.push_back(prepare(s, reference, s_bar, config, skipped));
  }
  const auto train_intents = intent::to_intent_samples(train);

  std::vector<EpochLog> log;
  auto record = [&](int epoch, double loss, double mean_beta) {
    const DistillMetrics tm = evaluate(model, train_intents, p_min);
    log.push_back({epoch, "train", loss, tm.mae, tm.mse, tm.failure_rate, mean_beta});
    if (!eval_set.empty()) {
      const DistillMetrics em = evaluate(model, eval_set, p_min);
      log.push_back({epoch, "test", std::numeric_limits<double>::quiet_NaN(), em.mae, em.mse,
                     em.failure_rate, mean_beta});
    }
  };

  {
    std::vector<const Prepared*> all;
    for (const auto& p : data) all.push_back(&p);
    StudentModel probe = model;
    const LossResult r0 = loss_and_grad(probe, all);
    record(0, r0.loss, r0.mean_beta);
  }

  Rng rng(derive_seed(config.seed, "distill.shuffle"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  std::vector<const Prepared*> batch;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0, beta_sum = 0.0;
    int pairs = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i)
        batch.push_back(&data[order[i]]);
      model.params().zero_grad();
      const LossResult r = loss_and_grad(model, batch);
      if (!std::isfinite(r.loss)) throw TrainingError("distillation loss is not finite", epoch);
      if (r.pairs == 0) continue;
      loss_sum += r.loss * r.pairs;
      beta_sum += r.mean_beta * r.pairs;
      pairs += r.pairs;
      model.params().adam_step({.lr = config.learning_rate});
    }
    if (pairs == 0) throw TrainingError("no usable preference pairs", epoch);
    record(epoch, loss_sum / pairs, beta_sum / pairs);
  }
  return DistillResult{std::move(model), reference, s_bar, std::move(log), skipped};
}

// ---------------------------------------------------------------------------

void save_student(const StudentModel& model, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "gensfc-student";
  j["version"] = 1;
  j["hidden"] = model.hidden();
  j["embed_dim"] = model.embed_dim();
  j["vocab_step"] = model.vocab().step();
  j["seed"] = model.seed();
  j["head"] = to_string(model.head());
  nlohmann::json params = nlohmann::json::object();
  for (const auto& name : model.params().names()) {
    const nn::Matrix& m = model.params().value(name);
    params[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"values", m.values()}};
  }
  j["params"] = std::move(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump() << '\n';
}

StudentModel load_student(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    if (j.at("format") != "gensfc-student") throw ConfigError("not a student checkpoint");
    StudentModel model(j.at("hidden").get<int>(), j.at("vocab_step").get<double>(),
                       j.at("seed").get<std::uint64_t>(), j.at("embed_dim").get<int>(),
                       head_from_string(j.at("head").get<std::string>()));
    for (const auto& name : model.params().names()) {
      const auto& jm = j.at("params").at(name);
      nn::Matrix& m = model.params().value(name);
      if (jm.at("rows").get<int>() != m.rows() || jm.at("cols").get<int>() != m.cols())
        throw ConfigError("checkpoint shape mismatch for " + name);
      m.values() = jm.at("values").get<std::vector<double>>();
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_training_log(const std::filesystem::path& path, std::span<const EpochLog> log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "epoch,split,loss,mae,mse,failure_rate,mean_beta\n";
  out << std::setprecision(17);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.split << ',';
    if (std::isfinite(e.loss)) out << e.loss;
    out << ',' << e.mae << ',' << e.mse << ',' << e.failure_rate << ',' << e.mean_beta << '\n';
  }
}

}  // namespace gensfc::distill
