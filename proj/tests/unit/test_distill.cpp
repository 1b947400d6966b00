#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "gensfc/distill.hpp"
#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"

using namespace gensfc;
using namespace gensfc::distill;
using intent::IntentSample;
using intent::IoKDSample;
using intent::Prompt;

namespace {

PreferenceVector pv(double a, double b, double c, double d) {
  return PreferenceVector::project({a, b, c, d});
}

void perturb(StudentModel& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (std::size_t i = 0; i < m.params().num_values(); ++i)
    m.params().flat_value(i) += scale * rng.uniform(-1.0, 1.0);
}

std::vector<IoKDSample> small_batch() {
  return {
      {{"make a sharp detailed poster", 1, ""}, pv(.6, .2, .1, .1), {pv(.1, .1, .7, .1), pv(.1, .1, .1, .7)}},
      {{"answer fast please", 2, ""}, pv(.2, .1, .6, .1), {pv(.7, .1, .1, .1)}},
      {{"keep it reliable and accurate", 2, ""}, pv(.2, .3, .1, .4), {pv(.1, .1, .7, .1), pv(.8, .1, .05, .05), pv(.05, .05, .05, .85)}},
  };
}

// Central differences on every coordinate with a non-zero analytic gradient
// plus a sample of the rest.
double max_grad_error(StudentModel& model, const StudentModel& ref, std::span<const IoKDSample> batch,
                      const PreferenceVector& s_bar, const DistillConfig& cfg) {
  iokd_loss(model, ref, batch, s_bar, cfg);
  const auto grads = model.params().flatten_grads();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (grads[i] != 0.0 || i % 97 == 0) idx.push_back(i);
  std::vector<double> analytic;
  for (std::size_t i : idx) analytic.push_back(grads[i]);
  auto loss = [&] { return iokd_loss(model, ref, batch, s_bar, cfg).loss; };
  auto coord = [&](std::size_t k) -> double& { return model.params().flat_value(idx[k]); };
  nn::GradCheckOptions opt;
  opt.samples = idx.size();
  return nn::finite_diff_check(loss, coord, analytic, opt).max_rel_error;
}

std::vector<IntentSample> labelled(std::initializer_list<PreferenceVector> prefs) {
  std::vector<IntentSample> out;
  int i = 0;
  for (const auto& p : prefs) out.push_back({{"prompt " + std::to_string(i++), 1, ""}, p});
  return out;
}

}  // namespace

TEST_CASE("preference vocabulary") {
  const PreferenceVocab v;
  CHECK(v.size() == 1771);
  std::set<std::array<double, 4>> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(is_valid_preference(v.entry(i).weights()));
    seen.insert(v.entry(i).weights());
    CHECK(v.snap(v.entry(i)) == static_cast<int>(i));
  }
  CHECK(seen.size() == v.size());
  CHECK(PreferenceVocab(0.5).size() == 10);
  CHECK_THROWS_AS(PreferenceVocab(0.3), DomainError);

  // Midpoint between two neighbours snaps to the lower index.
  const PreferenceVocab coarse(0.5);
  const Weights a = coarse.entry(0).weights(), b = coarse.entry(1).weights();
  Weights mid{};
  for (std::size_t k = 0; k < kPrefDim; ++k) mid[k] = 0.5 * (a[k] + b[k]);
  CHECK(coarse.snap(mid) == 0);

  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const auto d = rng.dirichlet(std::vector<double>(4, 1.0));
    const PreferenceVector s = pv(d[0], d[1], d[2], d[3]);
    int best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < v.size(); ++i) {
      double dist = 0.0;
      for (std::size_t k = 0; k < kPrefDim; ++k) dist += std::pow(v.entry(i)[k] - s[k], 2);
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(i);
      }
    }
    CHECK(v.snap(s) == best);
  }
}

TEST_CASE("policy log-probabilities") {
  for (HeadKind head : {HeadKind::kFree, HeadKind::kFactorized}) {
    StudentModel m(32, 0.05, 1, intent::kEmbedDim, head);
    CHECK(policy_logprob(m, "any prompt", PreferenceVector::even()) ==
          doctest::Approx(-std::log(1771.0)).epsilon(1e-12));
    perturb(m, 2, 0.2);
    const auto lp = nn::log_softmax(m.logits("write a quick summary"));
    double total = 0.0;
    for (double x : lp) {
      CHECK(x <= 0.0);
      total += std::exp(x);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("dynamic beta") {
  const PreferenceVector s = pv(.4, .3, .2, .1);
  CHECK(dynamic_beta(s, s, 0.5, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  // Axis vectors are at distance 0.5 before the floor; after it, slightly less.
  const PreferenceVector x = pv(1, 0, 0, 0), y = pv(0, 1, 0, 0);
  const double d = angular_distance(x, y);
  CHECK(dynamic_beta(x, y, 2.0, 1.0) == doctest::Approx(2.0 * (1.0 - d)).epsilon(1e-12));
  CHECK(d == doctest::Approx(0.5).epsilon(1e-2));
  CHECK(dynamic_beta(x, y, 2.0, 0.0) == 2.0);
  CHECK(dynamic_beta(x, y, 2.0, 2.0) == doctest::Approx(2.0 * std::max(1.0 - 2.0 * d, 0.05)));
  double prev = 1e300;
  for (double w : {0.25, 0.4, 0.55, 0.7, 0.85, 0.997}) {
    const double rest = (1.0 - w) / 3.0;
    const double b = dynamic_beta(pv(w, rest, rest, rest), PreferenceVector::even(), 1.0, 1.5);
    CHECK(b <= prev);
    CHECK(b >= 0.05);
    prev = b;
  }
}

TEST_CASE("iokd loss equals ln 2 when the model is the reference") {
  const auto batch = small_batch();
  for (HeadKind head : {HeadKind::kFree, HeadKind::kFactorized}) {
    StudentModel m(32, 0.05, 4, intent::kEmbedDim, head);
    perturb(m, 5, 0.3);
    const StudentModel ref = m;
    DistillConfig cfg;
    const auto r = iokd_loss(m, ref, batch, intent::mean_preference(std::span<const IoKDSample>(batch)), cfg);
    CHECK(std::abs(r.loss - std::log(2.0)) < 1e-12);
    CHECK(r.pairs == 6);
    CHECK(r.skipped == 0);
  }
}

TEST_CASE("iokd loss gradient matches finite differences") {
  const auto batch = small_batch();
  const PreferenceVector s_bar = intent::mean_preference(std::span<const IoKDSample>(batch));
  for (HeadKind head : {HeadKind::kFree, HeadKind::kFactorized}) {
    for (std::uint64_t point : {1u, 2u, 3u}) {
      StudentModel ref(16, 0.05, 7, intent::kEmbedDim, head);
      perturb(ref, 100 + point, 0.2);
      StudentModel m = ref;
      perturb(m, 200 + point, 0.3);
      DistillConfig cfg;
      cfg.beta_base = 1.5;
      CHECK(max_grad_error(m, ref, batch, s_bar, cfg) < 1e-4);
    }
  }
}

TEST_CASE("margin identities") {
  StudentModel ref(32, 0.05, 9);
  perturb(ref, 1, 0.2);
  StudentModel m = ref;
  perturb(m, 2, 0.3);
  const std::string text = "a sharp professional render";
  const PreferenceVector sp = pv(.6, .2, .1, .1), sc = pv(.1, .1, .2, .6);
  const double m1 = iokd_margin(m, ref, text, sp, sc, 0.7);
  CHECK(m1 != 0.0);
  CHECK(iokd_margin(m, ref, text, sc, sp, 0.7) == doctest::Approx(-m1).epsilon(1e-12));
  CHECK(iokd_margin(m, ref, text, sp, sc, 1.4) == doctest::Approx(2.0 * m1).epsilon(1e-12));
  CHECK(iokd_margin(ref, ref, text, sp, sc, 0.7) == 0.0);

  // Doubling beta_base doubles every margin, which the loss reflects.
  const std::vector<IoKDSample> one = {{{text, 1, ""}, sp, {sc}}};
  DistillConfig cfg;
  cfg.scale_factor = 0.0;
  cfg.beta_base = 0.7;
  const double l1 = iokd_loss(m, ref, one, sp, cfg).loss;
  CHECK(l1 == doctest::Approx(std::log1p(std::exp(-m1))).epsilon(1e-12));
  cfg.beta_base = 1.4;
  CHECK(iokd_loss(m, ref, one, sp, cfg).loss == doctest::Approx(std::log1p(std::exp(-2.0 * m1))).epsilon(1e-12));
}

TEST_CASE("iokd loss bookkeeping") {
  StudentModel m(8, 0.05, 1);
  const StudentModel ref = m;
  DistillConfig cfg;
  // The contrastive snaps to the same entry as the positive.
  const std::vector<IoKDSample> collide = {
      {{"x", 1, ""}, pv(.4, .3, .2, .1), {pv(.401, .299, .2, .1), pv(.1, .2, .3, .4)}}};
  const auto r = iokd_loss(m, ref, collide, PreferenceVector::even(), cfg);
  CHECK(r.skipped == 1);
  CHECK(r.pairs == 1);
  CHECK_THROWS_AS(iokd_loss(m, ref, std::span<const IoKDSample>(), PreferenceVector::even(), cfg), SizeError);
  const std::vector<IoKDSample> none = {{{"x", 1, ""}, pv(.4, .3, .2, .1), {}}};
  CHECK_THROWS_AS(iokd_loss(m, ref, none, PreferenceVector::even(), cfg), SizeError);
}

TEST_CASE("one gradient step raises the positive's log-probability") {
  StudentModel m(32, 0.05, 3);
  perturb(m, 4, 0.1);
  const StudentModel ref = m;
  const std::vector<IoKDSample> one = {{{"make it fast", 2, ""}, pv(.2, .1, .6, .1), {pv(.7, .1, .1, .1)}}};
  DistillConfig cfg;
  const double before = policy_logprob(m, "make it fast", one[0].preference);
  iokd_loss(m, ref, one, one[0].preference, cfg);
  m.params().adam_step({.lr = 1e-3});
  CHECK(policy_logprob(m, "make it fast", one[0].preference) > before);
}

TEST_CASE("predict and evaluate") {
  StudentModel m(16, 0.05, 2);
  perturb(m, 3, 0.3);
  CHECK(predict(m, "hello there", 0.0).has_value());
  CHECK_FALSE(predict(m, "hello there", 1.0).has_value());

  const auto test = labelled({pv(.4, .3, .2, .1), pv(.1, .1, .1, .7), pv(.25, .25, .25, .25)});
  CHECK(evaluate(m, test, 0.0).failure_rate == 0.0);
  CHECK(evaluate(m, test, 1.0).failure_rate == 1.0);
  CHECK(evaluate(m, test, 1.0).mse == 0.0);

  // Constant predictor equal to the single label.
  const auto single = labelled({pv(.4, .3, .2, .1)});
  const auto exact = metrics_for_constant(single[0].preference, single);
  CHECK(exact.mae == 0.0);
  CHECK(exact.mse == 0.0);
  CHECK_THROWS_AS(evaluate(m, std::span<const IntentSample>(), 0.0), SizeError);
}

TEST_CASE("even baseline equals the direct deviation sum") {
  Rng rng(8);
  std::vector<IntentSample> test;
  for (int i = 0; i < 300; ++i) {
    const auto d = rng.dirichlet(std::vector<double>{2.0, 1.0, 3.0, 0.5});
    test.push_back({{"t" + std::to_string(i), 1, ""}, pv(d[0], d[1], d[2], d[3])});
  }
  long double sq = 0.0L, ab = 0.0L;
  for (const auto& s : test)
    for (std::size_t k = 0; k < kPrefDim; ++k) {
      const long double dv = static_cast<long double>(s.preference[k]) - 0.25L;
      sq += dv * dv;
      ab += dv < 0 ? -dv : dv;
    }
  const auto m = even_baseline_metrics(test);
  CHECK(std::abs(m.mse - static_cast<double>(sq / (4.0L * test.size()))) < 1e-12);
  CHECK(std::abs(m.mae - static_cast<double>(ab / (4.0L * test.size()))) < 1e-12);
  CHECK(m.failure_rate == 0.0);

  // Symmetric around the even vector.
  const auto sym = labelled({pv(.35, .15, .25, .25), pv(.15, .35, .25, .25)});
  CHECK(even_baseline_metrics(sym).mae == doctest::Approx(0.05).epsilon(1e-9));
}

namespace {

std::vector<IoKDSample> seeded_dataset(int n, std::uint64_t seed) {
  intent::TeacherOracle oracle(intent::default_intent_config(), seed);
  const auto demo = intent::label_prompts(intent::generate_prompts(oracle.config(), 1, 10, seed), oracle);
  std::vector<Prompt> hp;
  for (int app : {1, 2}) {
    const auto p = intent::generate_prompts(oracle.config(), app, 100, seed + 1);
    hp.insert(hp.end(), p.begin(), p.end());
  }
  const auto hist = intent::label_prompts(hp, oracle);
  return intent::build_iokd_dataset(demo, hist, n - 10, 4, oracle, seed);
}

}  // namespace

TEST_CASE("train_distill") {
  const auto data = seeded_dataset(200, 3);
  DistillConfig cfg;
  cfg.seed = 3;

  SUBCASE("zero epochs leaves the student at the reference") {
    cfg.epochs = 0;
    const auto r = train_distill(data, cfg);
    CHECK(r.model.params().flatten() == r.reference.params().flatten());
    REQUIRE(r.log.size() == 1);
    CHECK(std::abs(r.log[0].loss - std::log(2.0)) < 1e-9);
  }
  SUBCASE("training lowers the loss and is deterministic") {
    cfg.epochs = 5;
    const auto a = train_distill(data, cfg);
    const auto b = train_distill(data, cfg);
    CHECK(a.model.params().flatten() == b.model.params().flatten());
    CHECK(std::abs(a.log.front().loss - std::log(2.0)) < 1e-9);
    CHECK(a.log.back().loss < std::log(2.0));
    for (const auto& e : a.log) CHECK(e.split == "train");
  }
  SUBCASE("without warm start the reference is the initial student") {
    cfg.epochs = 0;
    cfg.warm_start_epochs = 0;
    const auto r = train_distill(data, cfg);
    CHECK(policy_logprob(r.reference, data[0].prompt.text, data[0].preference) ==
          doctest::Approx(-std::log(1771.0)));
  }
  SUBCASE("configuration errors") {
    cfg.beta_base = 0.0;
    CHECK_THROWS_AS(train_distill(data, cfg), ConfigError);
    CHECK_THROWS_AS(train_distill(std::span<const IoKDSample>(), DistillConfig{}), SizeError);
  }
}

TEST_CASE("student checkpoint and training log files") {
  const auto dir = std::filesystem::temp_directory_path() / "gensfc_test_distill";
  std::filesystem::create_directories(dir);
  for (HeadKind head : {HeadKind::kFree, HeadKind::kFactorized}) {
    StudentModel m(16, 0.05, 5, intent::kEmbedDim, head);
    perturb(m, 6, 0.2);
    save_student(m, dir / "student.json");
    const StudentModel back = load_student(dir / "student.json");
    CHECK(back.head() == head);
    CHECK(back.params().flatten() == m.params().flatten());
    CHECK(back.logits("render this") == m.logits("render this"));
  }
  const std::vector<EpochLog> log = {{0, "train", 0.69, 0.1, 0.02, 0.0, 0.5},
                                     {0, "test", std::nan(""), 0.1, 0.02, 0.0, 0.5}};
  write_training_log(dir / "log.csv", log);
  std::ifstream in(dir / "log.csv");
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK(header == "epoch,split,loss,mae,mse,failure_rate,mean_beta");
  CHECK(row1.rfind("0,train,0.68", 0) == 0);
  CHECK(row2.rfind("0,test,,", 0) == 0);
  std::filesystem::remove_all(dir);
}
