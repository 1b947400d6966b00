#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "gensfc/error.hpp"
#include "gensfc/intent.hpp"
#include "gensfc/rng.hpp"

using namespace gensfc;
using namespace gensfc::intent;

namespace {

bool has_token_overlap(const std::string& a, const std::string& b) {
  const auto ta = tokenize(a), tb = tokenize(b);
  const std::set<std::string> sa(ta.begin(), ta.end());
  return std::any_of(tb.begin(), tb.end(), [&](const std::string& t) { return sa.count(t) > 0; });
}

PreferenceVector pv(double a, double b, double c, double d) {
  return PreferenceVector::project({a, b, c, d});
}

IntentConfig noiseless() {
  IntentConfig cfg = default_intent_config();
  cfg.noise_scale = 0.0;
  cfg.outlier_rate = 0.0;
  return cfg;
}

void check_valid(const PreferenceVector& s) { CHECK(is_valid_preference(s.weights())); }

}  // namespace

TEST_CASE("tokenize and embed") {
  CHECK(tokenize("Make it FAST, please!") == std::vector<std::string>{"make", "it", "fast", "please"});
  CHECK(tokenize("  ...  ").empty());

  const auto e = embed("render a sharp poster");
  CHECK(e == embed("render a sharp poster"));
  CHECK(e.size() == static_cast<std::size_t>(kEmbedDim));
  double norm = 0.0;
  for (double v : e) norm += v * v;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(e, e) == doctest::Approx(1.0).epsilon(1e-12));
  // Case and punctuation do not matter.
  CHECK(embed("Render a SHARP poster!") == e);

  const auto z = embed("");
  CHECK(std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
  CHECK(cosine_similarity(z, e) == 0.0);
}

TEST_CASE("cosine similarity examples") {
  const std::vector<double> a{0.6, 0.8, 0.0}, b{0.0, 0.0, 1.0}, na{-0.6, -0.8, 0.0};
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity(a, b) == 0.0);
  CHECK(cosine_similarity(a, na) == doctest::Approx(-1.0));
}

TEST_CASE("prompts sharing no tokens have small similarity") {
  const IntentConfig cfg = default_intent_config();
  std::vector<Prompt> prompts;
  for (int app : {1, 2}) {
    auto p = generate_prompts(cfg, app, 200, 99);
    prompts.insert(prompts.end(), p.begin(), p.end());
  }
  std::vector<std::string> phrases;
  for (const auto& app : cfg.applications) {
    phrases.insert(phrases.end(), app.openers.begin(), app.openers.end());
    phrases.insert(phrases.end(), app.tasks.begin(), app.tasks.end());
  }
  int pairs = 0;
  double worst = 0.0;
  for (std::size_t i = 0; i < phrases.size() && pairs < 20; ++i)
    for (std::size_t j = i + 1; j < phrases.size() && pairs < 20; ++j) {
      if (has_token_overlap(phrases[i], phrases[j])) continue;
      worst = std::max(worst, std::abs(cosine_similarity(embed(phrases[i]), embed(phrases[j]))));
      ++pairs;
    }
  CHECK(pairs == 20);
  CHECK(worst <= 0.2);
}

TEST_CASE("angular distance examples and properties") {
  CHECK(angular_distance(Weights{1, 0, 0, 0}, Weights{0, 1, 0, 0}) == doctest::Approx(0.5));
  CHECK(angular_distance(Weights{.5, .5, 0, 0}, Weights{.5, 0, .5, 0}) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const Weights a{.1, .2, .3, .4};
  CHECK(angular_distance(a, a) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(angular_distance(a, Weights{.3, .6, .9, 1.2}) < 1e-7);
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Weights x{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    const Weights y{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    CHECK(angular_distance(x, y) == angular_distance(y, x));
    CHECK(angular_distance(x, y) >= 0.0);
    CHECK(angular_distance(x, y) <= 0.5);
  }
}

TEST_CASE("filter_relevant") {
  TeacherOracle oracle(default_intent_config(), 3);
  const auto hist = label_prompts(generate_prompts(oracle.config(), 1, 40, 1), oracle);
  const auto user = label_prompts(generate_prompts(oracle.config(), 2, 10, 2), oracle);
  CHECK(filter_relevant(hist, user, -1.0).size() == hist.size());
  CHECK(filter_relevant(hist, user, 1.0 + 1e-9).empty());

  std::vector<IntentSample> with_copy = hist;
  with_copy.push_back(user[0]);
  const auto kept = filter_relevant(with_copy, user, 1.0 - 1e-12);
  REQUIRE(!kept.empty());
  CHECK(kept.back().prompt.text == user[0].prompt.text);

  std::size_t prev = hist.size();
  for (double tau : {-1.0, 0.0, 0.2, 0.3, 0.5, 0.8, 1.0}) {
    const auto f = filter_relevant(hist, user, tau);
    CHECK(f.size() <= prev);
    prev = f.size();
    // Stable subsequence of the input.
    std::size_t pos = 0;
    for (const auto& s : f) {
      while (pos < hist.size() && hist[pos].prompt.text != s.prompt.text) ++pos;
      CHECK(pos < hist.size());
      ++pos;
    }
  }
}

TEST_CASE("topk_contrastive") {
  const PreferenceVector s = pv(.7, .1, .1, .1);
  const std::vector<PreferenceVector> pool = {s, pv(.1, .1, .1, .7), pv(.25, .25, .25, .25),
                                              pv(.1, .7, .1, .1)};
  const auto all = topk_contrastive(s, pool, 4);
  REQUIRE(all.size() == 4);
  CHECK(all.back() == s);
  for (std::size_t i = 1; i < all.size(); ++i)
    CHECK(angular_distance(s, all[i - 1]) >= angular_distance(s, all[i]));
  // Equal distances keep pool order.
  CHECK(all[0] == pool[1]);
  CHECK(all[1] == pool[3]);

  const std::vector<PreferenceVector> two = {s, pv(.001, .997, .001, .001)};
  CHECK(topk_contrastive(s, two, 1).front() == two[1]);
  CHECK_THROWS_AS(topk_contrastive(s, two, 3), SizeError);
}

TEST_CASE("teacher oracle") {
  const IntentConfig cfg = noiseless();
  TeacherOracle oracle(cfg, 5);
  const auto& app = cfg.application(2);
  const Prompt plain{"please answer this", 2, ""};
  CHECK(oracle.translate(plain) == PreferenceVector::project(app.base));

  // One urgency keyword: shift then project.
  const auto& urgency = *std::find_if(cfg.keyword_classes.begin(), cfg.keyword_classes.end(),
                                      [](const KeywordClass& k) { return k.name == "urgency"; });
  const Prompt fast{"please answer this, make it fast", 2, ""};
  Weights expect = app.base;
  for (std::size_t i = 0; i < kPrefDim; ++i) expect[i] += urgency.shift[i];
  CHECK(oracle.translate(fast) == PreferenceVector::project(expect));

  // Noise off: a function of (application, keyword multiset) only.
  const Prompt reordered{"make it fast, answer this please", 2, ""};
  CHECK(oracle.translate(reordered) == oracle.translate(fast));

  CHECK_THROWS_AS(oracle.translate(Prompt{"hello", 42, ""}), ConfigError);

  TeacherOracle noisy(default_intent_config(), 5);
  const auto p = generate_prompts(noisy.config(), 1, 50, 8);
  for (const auto& q : p) {
    CHECK(noisy.translate(q) == noisy.translate(q));
    check_valid(noisy.translate(q));
  }
}

TEST_CASE("generate_prompts") {
  const IntentConfig cfg = default_intent_config();
  CHECK(generate_prompts(cfg, 1, 30, 4)[7].text == generate_prompts(cfg, 1, 30, 4)[7].text);
  CHECK(generate_prompts(cfg, 1, 0, 4).empty());
  TeacherOracle oracle(cfg, 1);
  const auto prompts = generate_prompts(cfg, 1, 400, 17);
  std::size_t quality_idx = 0;
  while (cfg.keyword_classes[quality_idx].name != "quality") ++quality_idx;
  int with_quality = 0;
  for (const auto& p : prompts) {
    CHECK(!p.text.empty());
    CHECK(p.application_id == 1);
    if (oracle.keyword_counts(p.text)[quality_idx] > 0) ++with_quality;
  }
  CHECK(with_quality >= 200);
}

TEST_CASE("augment") {
  TeacherOracle oracle(default_intent_config(), 9);
  const auto demo = label_prompts(generate_prompts(oracle.config(), 1, 10, 3), oracle);
  const auto same = augment(demo, 0, oracle, 1);
  REQUIRE(same.size() == demo.size());
  for (std::size_t i = 0; i < demo.size(); ++i) CHECK(same[i].prompt.text == demo[i].prompt.text);

  const auto out = augment(demo, 200, oracle, 1);
  CHECK(out.size() == demo.size() + 200);
  const std::span<const IntentSample> synth(out.begin() + static_cast<long>(demo.size()), out.end());
  CHECK(angular_distance(mean_preference(synth), mean_preference(demo)) <= 0.1);

  // Only keywords present in the demo texts appear in synthetic prompts.
  std::vector<int> demo_counts(oracle.config().keyword_classes.size(), 0);
  for (const auto& d : demo) {
    const auto c = oracle.keyword_counts(d.prompt.text);
    for (std::size_t i = 0; i < c.size(); ++i) demo_counts[i] += c[i];
  }
  for (const auto& s : synth) {
    const auto c = oracle.keyword_counts(s.prompt.text);
    for (std::size_t i = 0; i < c.size(); ++i)
      if (demo_counts[i] == 0) CHECK(c[i] == 0);
    check_valid(s.preference);
  }
  CHECK_THROWS_AS(augment({}, 5, oracle, 1), SizeError);
}

TEST_CASE("build_iokd_dataset") {
  TeacherOracle oracle(default_intent_config(), 12);
  const auto demo = label_prompts(generate_prompts(oracle.config(), 2, 10, 5), oracle);
  const auto hist = label_prompts(generate_prompts(oracle.config(), 1, 60, 6), oracle);
  const auto ds = build_iokd_dataset(demo, hist, 40, 4, oracle, 77);
  CHECK(ds.size() == 50);
  for (const auto& s : ds) {
    REQUIRE(s.contrastive.size() == 4);
    for (const auto& c : s.contrastive) CHECK(angular_distance(c, s.preference) > 0.0);
    for (std::size_t i = 1; i < s.contrastive.size(); ++i)
      CHECK(angular_distance(s.preference, s.contrastive[i - 1]) >=
            angular_distance(s.preference, s.contrastive[i]));
  }
  const auto again = build_iokd_dataset(demo, hist, 40, 4, oracle, 77);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].prompt.text == again[i].prompt.text);
    CHECK(ds[i].preference == again[i].preference);
    CHECK(ds[i].contrastive == again[i].contrastive);
  }

  const std::vector<IntentSample> one_demo = {demo[0]};
  const std::vector<IntentSample> identical = {demo[0]};
  CHECK_THROWS_AS(build_iokd_dataset(one_demo, identical, 0, 1, oracle, 1), SizeError);
}

TEST_CASE("mean_preference") {
  const std::vector<IntentSample> single = {{{"x", 1, ""}, pv(.4, .3, .2, .1)}};
  CHECK(mean_preference(std::span<const IntentSample>(single)) == single[0].preference);
  const std::vector<IntentSample> pair = {{{"x", 1, ""}, pv(.6, .1, .2, .1)},
                                          {{"y", 1, ""}, pv(.2, .1, .6, .1)}};
  const auto m = mean_preference(std::span<const IntentSample>(pair));
  CHECK(m[0] == doctest::Approx(0.4));
  CHECK(m[2] == doctest::Approx(0.4));
  CHECK(m[1] == doctest::Approx(0.1));
  CHECK_THROWS(mean_preference(std::span<const IntentSample>()));
}

TEST_CASE("dataset files round-trip") {
  TeacherOracle oracle(default_intent_config(), 4);
  const auto demo = label_prompts(generate_prompts(oracle.config(), 1, 5, 5), oracle);
  const auto hist = label_prompts(generate_prompts(oracle.config(), 2, 20, 6), oracle);
  const auto ds = build_iokd_dataset(demo, hist, 5, 3, oracle, 1);
  const auto path = std::filesystem::temp_directory_path() / "gensfc_test_dataset.jsonl";
  save_dataset(path, std::span<const IoKDSample>(ds));
  const auto back = load_dataset(path);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back[i].prompt.text == ds[i].prompt.text);
    CHECK(back[i].prompt.application_id == ds[i].prompt.application_id);
    CHECK(back[i].preference == ds[i].preference);
    CHECK(back[i].contrastive == ds[i].contrastive);
  }
  {
    std::ofstream bad(path);
    bad << "{\"text\": \"x\"}\n";
  }
  CHECK_THROWS_AS(load_dataset(path), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("config loading validates its input") {
  CHECK_THROWS_AS(intent_config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(intent_config_from_json("{\"applications\": []}"), ConfigError);
  const IntentConfig cfg = default_intent_config();
  CHECK(cfg.applications.size() == 2);
  CHECK_THROWS_AS(cfg.application(3), ConfigError);
}
