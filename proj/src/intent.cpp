#include "gensfc/intent.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"
#include "json.hpp"

namespace gensfc::intent {

using nlohmann::json;

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) && c < 128) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

void add_feature(std::vector<double>& v, const std::string& feature) {
  const std::uint64_t h = fnv1a64(feature);
  const std::size_t bucket = h % v.size();
  v[bucket] += (h >> 63) ? -1.0 : 1.0;
}

}  // namespace

std::vector<double> embed(std::string_view text, int dim) {
  if (dim < 1) throw DomainError("embedding dimension must be positive");
  std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
  const auto toks = tokenize(text);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    add_feature(v, "u:" + toks[i]);
    if (i + 1 < toks.size()) add_feature(v, "b:" + toks[i] + " " + toks[i + 1]);
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return v;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("cosine_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

const ApplicationProfile& IntentConfig::application(int id) const {
  for (const auto& a : applications)
    if (a.id == id) return a;
  throw ConfigError("unknown application id " + std::to_string(id));
}

namespace {

Weights weights_from(const json& j) {
  if (!j.is_array() || j.size() != kPrefDim) throw ConfigError("expected 4 weights");
  Weights w{};
  for (std::size_t i = 0; i < kPrefDim; ++i) w[i] = j.at(i).get<double>();
  return w;
}

json weights_json(const Weights& w) { return json::array({w[0], w[1], w[2], w[3]}); }

}  // namespace

IntentConfig intent_config_from_json(const std::string& text) {
  IntentConfig cfg;
  try {
    const json j = json::parse(text);
    cfg.noise_scale = j.value("noise_scale", cfg.noise_scale);
    cfg.outlier_rate = j.value("outlier_rate", cfg.outlier_rate);
    cfg.clause_templates = j.at("clause_templates").get<std::vector<std::string>>();
    for (const json& jc : j.at("keyword_classes")) {
      KeywordClass kc;
      kc.name = jc.at("name").get<std::string>();
      kc.keywords = jc.at("keywords").get<std::vector<std::string>>();
      kc.shift = weights_from(jc.at("shift"));
      cfg.keyword_classes.push_back(std::move(kc));
    }
    for (const json& ja : j.at("applications")) {
      ApplicationProfile a;
      a.id = ja.at("id").get<int>();
      a.name = ja.value("name", "");
      a.base = weights_from(ja.at("base"));
      a.openers = ja.at("openers").get<std::vector<std::string>>();
      a.tasks = ja.at("tasks").get<std::vector<std::string>>();
      a.keyword_prob = ja.value("keyword_prob", std::map<std::string, double>{});
      cfg.applications.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("intent config: ") + e.what());
  }
  if (!(cfg.noise_scale >= 0.0 && cfg.noise_scale < 1.0))
    throw ConfigError("intent config: noise_scale must be in [0, 1)");
  if (!(cfg.outlier_rate >= 0.0 && cfg.outlier_rate <= 1.0))
    throw ConfigError("intent config: outlier_rate must be in [0, 1]");
  if (cfg.clause_templates.empty() || cfg.applications.empty())
    throw ConfigError("intent config: templates and applications must be non-empty");
  for (const auto& a : cfg.applications) {
    if (a.openers.empty() || a.tasks.empty())
      throw ConfigError("intent config: application " + std::to_string(a.id) +
                        " needs openers and tasks");
    for (const auto& [name, p] : a.keyword_prob) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("intent config: bad probability for " + name);
      const bool known = std::any_of(cfg.keyword_classes.begin(), cfg.keyword_classes.end(),
                                     [&](const KeywordClass& k) { return k.name == name; });
      if (!known) throw ConfigError("intent config: unknown keyword class " + name);
    }
  }
  return cfg;
}

IntentConfig load_intent_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return intent_config_from_json(buf.str());
}

IntentConfig default_intent_config() {
  if (const char* dir = std::getenv("GENSFC_CONFIG_DIR"))
    return load_intent_config(std::filesystem::path(dir) / "applications.json");
  return load_intent_config(std::filesystem::path(GENSFC_CONFIG_DIR) / "applications.json");
}

// ---------------------------------------------------------------------------

TeacherOracle::TeacherOracle(IntentConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed) {}

namespace {

int count_phrase(const std::vector<std::string>& toks, const std::vector<std::string>& phrase) {
  if (phrase.empty() || phrase.size() > toks.size()) return 0;
  int n = 0;
  for (std::size_t i = 0; i + phrase.size() <= toks.size(); ++i)
    if (std::equal(phrase.begin(), phrase.end(), toks.begin() + static_cast<long>(i))) ++n;
  return n;
}

}  // namespace

std::vector<int> TeacherOracle::keyword_counts(std::string_view text) const {
  const auto toks = tokenize(text);
  std::vector<int> counts;
  for (const auto& kc : config_.keyword_classes) {
    int n = 0;
    for (const auto& kw : kc.keywords) n += count_phrase(toks, tokenize(kw));
    counts.push_back(n);
  }
  return counts;
}

PreferenceVector TeacherOracle::clean(const Prompt& prompt) const {
  Weights w = config_.application(prompt.application_id).base;
  const auto counts = keyword_counts(prompt.text);
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::size_t i = 0; i < kPrefDim; ++i)
      w[i] += counts[c] * config_.keyword_classes[c].shift[i];
  return PreferenceVector::project(w);
}

PreferenceVector TeacherOracle::translate(const Prompt& prompt) const {
  const PreferenceVector base = clean(prompt);
  if (config_.noise_scale == 0.0 && config_.outlier_rate == 0.0) return base;
  const std::string label = std::to_string(prompt.application_id) + '|' + prompt.text;
  Rng rng(derive_seed(seed_, label));
  const double u = rng.uniform();
  std::vector<double> alpha(kPrefDim);
  if (u < config_.outlier_rate) {
    std::fill(alpha.begin(), alpha.end(), 1.0);
  } else {
    if (config_.noise_scale == 0.0) return base;
    // Dirichlet around the clean vector; per-component std is about
    // noise_scale * sqrt(w (1 - w)).
    const double conc = 1.0 / (config_.noise_scale * config_.noise_scale) - 1.0;
    for (std::size_t i = 0; i < kPrefDim; ++i) alpha[i] = conc * base[i];
  }
  const auto draw = rng.dirichlet(alpha);
  return PreferenceVector::project({draw[0], draw[1], draw[2], draw[3]});
}

// ---------------------------------------------------------------------------

namespace {

// allowed[c] lists the keywords of class c that may be used; an empty list
// disables the class.
Prompt compose_prompt(const IntentConfig& cfg, const ApplicationProfile& app,
                      const std::vector<std::vector<std::string>>& allowed, Rng& rng) {
  std::string text = app.openers[rng.index(app.openers.size())];
  text += ' ';
  text += app.tasks[rng.index(app.tasks.size())];
  std::vector<std::string> clauses;
  for (std::size_t c = 0; c < cfg.keyword_classes.size(); ++c) {
    const auto it = app.keyword_prob.find(cfg.keyword_classes[c].name);
    const double p = it == app.keyword_prob.end() ? 0.0 : it->second;
    if (allowed[c].empty() || !rng.bernoulli(p)) continue;
    const std::string& kw = allowed[c][rng.index(allowed[c].size())];
    std::string clause = cfg.clause_templates[rng.index(cfg.clause_templates.size())];
    const auto pos = clause.find("{kw}");
    if (pos != std::string::npos) clause.replace(pos, 4, kw);
    clauses.push_back(std::move(clause));
  }
  for (std::size_t i = 0; i < clauses.size(); ++i) text += (i == 0 ? ", " : " and ") + clauses[i];
  text += '.';
  return Prompt{std::move(text), app.id, {}};
}

}  // namespace

std::vector<Prompt> generate_prompts(const IntentConfig& config, int application_id, int count,
                                     std::uint64_t seed) {
  if (count < 0) throw DomainError("generate_prompts: negative count");
  const ApplicationProfile& app = config.application(application_id);
  std::vector<std::vector<std::string>> allowed;
  for (const auto& kc : config.keyword_classes) allowed.push_back(kc.keywords);
  Rng rng(derive_seed(seed, "prompts." + std::to_string(application_id)));
  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(compose_prompt(config, app, allowed, rng));
  return out;
}

std::vector<IntentSample> label_prompts(const std::vector<Prompt>& prompts,
                                        const TeacherOracle& oracle) {
  std::vector<IntentSample> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back({p, oracle.translate(p)});
  return out;
}

std::vector<IntentSample> filter_relevant(const std::vector<IntentSample>& historical,
                                          const std::vector<IntentSample>& user, double tau_min) {
  std::vector<std::vector<double>> user_emb;
  user_emb.reserve(user.size());
  for (const auto& u : user) user_emb.push_back(embed(u.prompt.text));
  std::vector<IntentSample> out;
  for (const auto& h : historical) {
    const auto e = embed(h.prompt.text);
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& ue : user_emb) best = std::max(best, cosine_similarity(e, ue));
    if (best >= tau_min) out.push_back(h);
  }
  return out;
}

std::vector<PreferenceVector> topk_contrastive(const PreferenceVector& sample_pref,
                                               const std::vector<PreferenceVector>& pool, int k) {
  if (k < 1) throw DomainError("topk_contrastive: k must be >= 1");
  if (pool.size() < static_cast<std::size_t>(k))
    throw SizeError("topk_contrastive: pool smaller than k");
  std::vector<std::pair<double, std::size_t>> ranked;
  ranked.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    ranked.emplace_back(angular_distance(sample_pref, pool[i]), i);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<PreferenceVector> out;
  for (int i = 0; i < k; ++i) out.push_back(pool[ranked[static_cast<std::size_t>(i)].second]);
  return out;
}

std::vector<IntentSample> augment(const std::vector<IntentSample>& demo, int n_aug,
                                  const TeacherOracle& oracle, std::uint64_t seed) {
  if (demo.empty()) throw SizeError("augment: empty demo set");
  if (n_aug < 0) throw DomainError("augment: negative n_aug");
  const IntentConfig& cfg = oracle.config();
  std::vector<std::vector<std::string>> allowed(cfg.keyword_classes.size());
  for (std::size_t c = 0; c < cfg.keyword_classes.size(); ++c) {
    for (const auto& kw : cfg.keyword_classes[c].keywords) {
      const auto phrase = tokenize(kw);
      const bool seen = std::any_of(demo.begin(), demo.end(), [&](const IntentSample& s) {
        return count_phrase(tokenize(s.prompt.text), phrase) > 0;
      });
      if (seen) allowed[c].push_back(kw);
    }
  }
  Rng rng(derive_seed(seed, "augment"));
  std::vector<IntentSample> out = demo;
  out.reserve(demo.size() + static_cast<std::size_t>(n_aug));
  for (int i = 0; i < n_aug; ++i) {
    const IntentSample& anchor = demo[rng.index(demo.size())];
    const ApplicationProfile& app = cfg.application(anchor.prompt.application_id);
    Prompt p = compose_prompt(cfg, app, allowed, rng);
    PreferenceVector s = oracle.translate(p);
    out.push_back({std::move(p), s});
  }
  return out;
}

std::vector<IoKDSample> build_iokd_dataset(const std::vector<IntentSample>& demo,
                                           const std::vector<IntentSample>& historical, int n_aug,
                                           int k, const TeacherOracle& oracle, std::uint64_t seed) {
  const auto samples = augment(demo, n_aug, oracle, seed);
  std::vector<PreferenceVector> pool;
  pool.reserve(historical.size());
  for (const auto& h : historical) pool.push_back(h.preference);

  std::vector<IoKDSample> out;
  out.reserve(samples.size());
  std::vector<PreferenceVector> candidates;
  for (const auto& s : samples) {
    candidates.clear();
    for (const auto& p : pool) {
      if (angular_distance(s.preference, p) <= 0.0) continue;
      if (std::find(candidates.begin(), candidates.end(), p) != candidates.end()) continue;
      candidates.push_back(p);
    }
    if (candidates.size() < static_cast<std::size_t>(k))
      throw SizeError("build_iokd_dataset: fewer than k distinct contrastive vectors");
    out.push_back({s.prompt, s.preference, topk_contrastive(s.preference, candidates, k)});
  }
  return out;
}

namespace {

template <class Sample>
PreferenceVector mean_of(std::span<const Sample> samples) {
  if (samples.empty()) throw SizeError("mean_preference: empty input");
  Weights acc{};
  for (const auto& s : samples)
    for (std::size_t i = 0; i < kPrefDim; ++i) acc[i] += s.preference[i];
  for (double& x : acc) x /= static_cast<double>(samples.size());
  return PreferenceVector::project(acc);
}

}  // namespace

PreferenceVector mean_preference(std::span<const IntentSample> samples) {
  return mean_of(samples);
}
PreferenceVector mean_preference(std::span<const IoKDSample> samples) { return mean_of(samples); }

std::vector<IntentSample> to_intent_samples(std::span<const IoKDSample> samples) {
  std::vector<IntentSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.prompt, s.preference});
  return out;
}

// ---------------------------------------------------------------------------

std::string dataset_record_json(const IoKDSample& s) {
  json j;
  j["text"] = s.prompt.text;
  j["application_id"] = s.prompt.application_id;
  j["preference"] = weights_json(s.preference.weights());
  json c = json::array();
  for (const auto& v : s.contrastive) c.push_back(weights_json(v.weights()));
  j["contrastive"] = std::move(c);
  j["annotation"] = s.prompt.annotation;
  return j.dump();
}

void save_dataset(const std::filesystem::path& path, std::span<const IoKDSample> samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto& s : samples) out << dataset_record_json(s) << '\n';
}

void save_dataset(const std::filesystem::path& path, std::span<const IntentSample> samples) {
  std::vector<IoKDSample> rows;
  rows.reserve(samples.size());
  for (const auto& s : samples) rows.push_back({s.prompt, s.preference, {}});
  save_dataset(path, std::span<const IoKDSample>(rows));
}

std::vector<IoKDSample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<IoKDSample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      IoKDSample s;
      s.prompt.text = j.at("text").get<std::string>();
      s.prompt.application_id = j.at("application_id").get<int>();
      s.prompt.annotation = j.value("annotation", "");
      s.preference = PreferenceVector::from_valid(weights_from(j.at("preference")));
      for (const json& c : j.value("contrastive", json::array()))
        s.contrastive.push_back(PreferenceVector::from_valid(weights_from(c)));
      if (s.prompt.text.empty()) throw ConfigError("empty text");
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace gensfc::intent
