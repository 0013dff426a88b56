#include <doctest.h>

#include <atomic>
#include <cmath>
#include <stdexcept>

#include "demix/errors.hpp"
#include "demix/search.hpp"

using namespace demix;

namespace {

double l1_to(const MixtureRatio& r, const std::vector<double>& target) {
  double d = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) d += std::abs(r[i] - target[i]);
  return d;
}

Evaluator l1_evaluator(std::vector<double> target) {
  return [target](const MixtureRatio& r) {
    ProxyEvaluation e;
    e.ranking_score = l1_to(r, target);
    e.per_benchmark_scores["l1"] = e.ranking_score;
    return e;
  };
}

const std::vector<std::string> kIds{"general", "math", "code"};

double r_squared(const RankPredictor& p, const std::vector<MixtureRatio>& xs,
                 const std::function<double(const MixtureRatio&)>& f) {
  double mean = 0.0;
  for (const auto& x : xs) mean += f(x);
  mean /= static_cast<double>(xs.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (const auto& x : xs) {
    const double y = f(x);
    ss_res += (y - predict(p, x)) * (y - predict(p, x));
    ss_tot += (y - mean) * (y - mean);
  }
  return 1.0 - ss_res / ss_tot;
}

}  // namespace

TEST_CASE("sample_simplex: single dimension and simplex invariant") {
  for (const auto& r : sample_simplex(1, 20, 3)) {
    REQUIRE(r.size() == 1);
    CHECK(r[0] == 1.0);
  }
  for (const auto& r : sample_simplex(5, 500, 4)) {
    double sum = 0.0;
    for (double w : r.weights()) {
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(sample_simplex(0, 1, 0), InvalidArgument);
}

TEST_CASE("sample_simplex: Dirichlet(1,1,1) moments over 100k samples") {
  const auto samples = sample_simplex(3, 100000, 12345);
  double mean[3] = {0, 0, 0};
  double above = 0;
  for (const auto& r : samples) {
    for (int k = 0; k < 3; ++k) mean[k] += r[static_cast<std::size_t>(k)];
    if (r[0] > 0.5) above += 1;
  }
  for (double& m : mean) {
    m /= 1e5;
    CHECK(std::abs(m - 1.0 / 3.0) <= 0.01);
  }
  // P(a1 > t) = (1 - t)^2 for the flat Dirichlet in three dimensions.
  CHECK(std::abs(above / 1e5 - 0.25) <= 0.01);
}

TEST_CASE("sample_simplex: seeded and reproducible") {
  const auto a = sample_simplex(4, 10, 99);
  const auto b = sample_simplex(4, 10, 99);
  const auto c = sample_simplex(4, 10, 100);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].weights() == b[i].weights());
  CHECK(a[0].weights() != c[0].weights());
}

TEST_CASE("gbdt: single stump on a step function") {
  const std::vector<double> x{0, 1, 2, 3};
  const std::vector<double> y{0, 0, 1, 1};
  GbdtConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.n_rounds = 1;
  cfg.tree.max_depth = 1;
  const auto p = fit_gbdt(x, 1, y, cfg);
  REQUIRE(p.trees().size() == 1);
  const auto& root = p.trees()[0].nodes[0];
  CHECK(root.feature == 0);
  CHECK(root.threshold == 1.5);
  CHECK(p.base_prediction() == 0.5);
  const double at0[] = {0.0};
  const double at3[] = {3.0};
  CHECK(p.predict(at0) == 0.0);
  CHECK(p.predict(at3) == 1.0);
}

TEST_CASE("gbdt: min_samples_leaf blocks small leaves") {
  const std::vector<double> x{0, 1, 2, 3};
  const std::vector<double> y{5, 0, 0, 0};
  GbdtConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.n_rounds = 1;
  cfg.tree.max_depth = 1;
  const auto p = fit_gbdt(x, 1, y, cfg);
  // The best split would isolate x=0, which needs a leaf of one sample.
  CHECK(p.trees()[0].nodes[0].threshold == 1.5);
}

TEST_CASE("fit_predictor: constant targets give the constant everywhere") {
  const auto xs = sample_simplex(3, 64, 1);
  const std::vector<double> y(xs.size(), 0.1);
  const auto p = fit_predictor(xs, y, GbdtConfig{});
  for (const auto& r : sample_simplex(3, 50, 2)) CHECK(predict(p, r) == 0.1);
  for (const auto& t : p.trees()) CHECK(t.leaf_count() == 1);
}

TEST_CASE("fit_predictor: repeated observation predicts its target") {
  const MixtureRatio r({0.2, 0.3, 0.5});
  const std::vector<MixtureRatio> xs(10, r);
  const std::vector<double> y(10, 7.25);
  const auto p = fit_predictor(xs, y, GbdtConfig{});
  CHECK(predict(p, r) == 7.25);
  CHECK(predict(p, MixtureRatio::uniform(3)) == 7.25);
}

TEST_CASE("fit_predictor: linear target held-out R^2") {
  const auto f = [](const MixtureRatio& r) { return 3.0 * r[0] + r[1]; };
  for (std::uint64_t seed : {0u, 1u, 2u, 3u, 4u}) {
    const auto train = sample_simplex(3, 64, seed * 2 + 1);
    const auto test = sample_simplex(3, 32, seed * 2 + 2);
    std::vector<double> y;
    for (const auto& r : train) y.push_back(f(r));
    const auto p = fit_predictor(train, y, GbdtConfig{});
    CHECK(r_squared(p, test, f) >= 0.9);
  }
}

TEST_CASE("fit_predictor: monotone along a simplex edge") {
  const auto f = [](const MixtureRatio& r) { return 3.0 * r[0] + r[1]; };
  const auto train = sample_simplex(3, 64, 77);
  std::vector<double> y;
  for (const auto& r : train) y.push_back(f(r));
  const auto p = fit_predictor(train, y, GbdtConfig{});
  // Edge a3 = 0: f = 1 + 2 a1 is increasing in a1.
  int violations = 0;
  double prev = -1e300;
  for (int i = 0; i <= 10; ++i) {
    const double t = i / 10.0;
    const double v = predict(p, MixtureRatio({t, 1.0 - t, 0.0}));
    if (v < prev) ++violations;
    prev = v;
  }
  CHECK(violations <= 1);
}

TEST_CASE("predict: dimension mismatch, determinism, batch agreement") {
  const auto train = sample_simplex(4, 40, 5);
  std::vector<double> y;
  for (const auto& r : train) y.push_back(r[0] * r[0] - r[3]);
  const auto p = fit_predictor(train, y, GbdtConfig{});
  CHECK_THROWS_AS(predict(p, MixtureRatio::uniform(3)), InvalidArgument);
  const auto probe = MixtureRatio({0.1, 0.2, 0.3, 0.4});
  CHECK(predict(p, probe) == predict(p, probe));

  std::vector<double> rows;
  for (const auto& r : sample_simplex(4, 5000, 6)) rows.insert(rows.end(), r.weights().begin(), r.weights().end());
  const auto par = p.predict_batch(rows);
  const auto ser = p.predict_batch_serial(rows);
  REQUIRE(par.size() == 5000);
  CHECK(par == ser);
  CHECK_THROWS_AS(p.predict_batch(std::vector<double>{1.0, 2.0, 3.0}), InvalidArgument);

  const auto again = fit_predictor(train, y, GbdtConfig{});
  CHECK(again.predict_batch(rows) == par);
}

TEST_CASE("fit_predictor: input validation") {
  const auto xs = sample_simplex(3, 4, 1);
  CHECK_THROWS_AS(fit_predictor({xs[0]}, {1.0}, GbdtConfig{}), InvalidArgument);
  CHECK_THROWS_AS(fit_predictor(xs, {1, 2, 3}, GbdtConfig{}), InvalidArgument);
  CHECK_THROWS_AS(fit_predictor(xs, {1, 2, 3, NAN}, GbdtConfig{}), InvalidArgument);
  GbdtConfig bad;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(fit_predictor(xs, {1, 2, 3, 4}, bad), InvalidArgument);
}

TEST_CASE("SamplePlan validation") {
  SamplePlan plan;
  CHECK(plan.total_evaluations() == 112);
  CHECK_NOTHROW(plan.validate());
  plan.top_k_average = plan.final_candidate_pool + 1;
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan = SamplePlan{};
  plan.per_iteration_counts = {64, 0};
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan.per_iteration_counts = {};
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan.per_iteration_counts = {1};
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
  plan = SamplePlan{};
  plan.final_candidate_pool = 10;
  plan.top_k_average = 5;
  plan.per_iteration_counts = {8, 11};
  CHECK_THROWS_AS(plan.validate(), InvalidArgument);
}

TEST_CASE("run_search: single iteration structure") {
  SamplePlan plan;
  plan.per_iteration_counts = {2};
  plan.final_candidate_pool = 10;
  plan.top_k_average = 2;
  plan.rng_seed = 8;
  const auto res = run_search(l1_evaluator({0.6, 0.3, 0.1}), plan, GbdtConfig{}, kIds);
  CHECK(res.transcript.entries.size() == 2);
  CHECK(res.transcript.fits.size() == 1);
  CHECK(res.transcript.fits[0].pool_size == 10);
  CHECK(res.transcript.final_top_predictions.size() == 2);
  double sum = 0.0;
  for (double w : res.mixture.weights()) sum += w;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.mixture.candidate_ids() == kIds);

  // Recompute the expected mean from the same random stream.
  Rng rng(plan.rng_seed);
  const auto evaluated = sample_simplex(3, 2, rng, kIds);
  const auto pool = sample_simplex(3, 10, rng, kIds);
  CHECK(res.transcript.entries[0].evaluation.ratio.weights() == evaluated[0].weights());
  std::vector<MixtureRatio> seen{evaluated[0], evaluated[1]};
  std::vector<double> scores{l1_to(evaluated[0], {0.6, 0.3, 0.1}), l1_to(evaluated[1], {0.6, 0.3, 0.1})};
  const auto p = fit_predictor(seen, scores, GbdtConfig{});
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < pool.size(); ++i) ranked.emplace_back(predict(p, pool[i]), i);
  std::sort(ranked.begin(), ranked.end());
  std::vector<double> mean(3, 0.0);
  for (int j = 0; j < 2; ++j) {
    for (std::size_t k = 0; k < 3; ++k) mean[k] += pool[ranked[static_cast<std::size_t>(j)].second][k] / 2.0;
  }
  for (std::size_t k = 0; k < 3; ++k) CHECK(res.mixture[k] == doctest::Approx(mean[k]).epsilon(1e-12));
}

TEST_CASE("run_search: constant evaluator") {
  SamplePlan plan;
  plan.per_iteration_counts = {8, 4};
  plan.final_candidate_pool = 200;
  plan.top_k_average = 16;
  const Evaluator constant = [](const MixtureRatio&) {
    ProxyEvaluation e;
    e.ranking_score = 4.0;
    return e;
  };
  const auto res = run_search(constant, plan, GbdtConfig{}, kIds);
  REQUIRE(res.transcript.entries.size() == 12);
  for (const auto& e : res.transcript.entries) CHECK(e.evaluation.ranking_score == 4.0);
  // All predictions tie, so the first 16 pool samples are averaged.
  Rng rng(plan.rng_seed);
  sample_simplex(3, 8, rng);
  sample_simplex(3, 200, rng);
  const auto pool = sample_simplex(3, 200, rng);
  std::vector<double> mean(3, 0.0);
  for (int j = 0; j < 16; ++j) {
    for (std::size_t k = 0; k < 3; ++k) mean[k] += pool[static_cast<std::size_t>(j)][k] / 16.0;
  }
  for (std::size_t k = 0; k < 3; ++k) CHECK(res.mixture[k] == doctest::Approx(mean[k]).epsilon(1e-12));
}

TEST_CASE("run_search: budget, selection and reproducibility") {
  SamplePlan plan;
  plan.final_candidate_pool = 20000;
  plan.rng_seed = 3;
  std::atomic<int> calls{0};
  const auto inner = l1_evaluator({0.6, 0.3, 0.1});
  const Evaluator counted = [&](const MixtureRatio& r) {
    ++calls;
    return inner(r);
  };
  const auto a = run_search(counted, plan, GbdtConfig{}, kIds);
  CHECK(calls == 112);
  CHECK(a.transcript.entries.size() == 112);
  REQUIRE(a.transcript.fits.size() == 3);
  CHECK(a.transcript.fits[0].n_observations == 64);
  CHECK(a.transcript.fits[1].n_observations == 96);
  CHECK(a.transcript.fits[2].n_observations == 112);
  CHECK(a.transcript.final_selection == "final_pool_only");

  for (const auto& e : a.transcript.entries) {
    if (e.iteration == 0) {
      CHECK(!e.predicted_score);
      continue;
    }
    REQUIRE(e.predicted_score);
    CHECK(*e.predicted_score <= a.transcript.fits[e.iteration - 1].pool_median_prediction);
  }

  const auto b = run_search(inner, plan, GbdtConfig{}, kIds);
  SearchOptions parallel;
  parallel.parallel_evaluations = true;
  const auto c = run_search(inner, plan, GbdtConfig{}, kIds, parallel);
  const auto text = transcript_jsonl(a.transcript, kIds);
  CHECK(text == transcript_jsonl(b.transcript, kIds));
  CHECK(text == transcript_jsonl(c.transcript, kIds));
  CHECK(a.mixture.weights() == c.mixture.weights());
  CHECK(l1_to(a.mixture, {0.6, 0.3, 0.1}) <= 0.2);
}

TEST_CASE("run_search: evaluator failure carries the ratio") {
  SamplePlan plan;
  plan.per_iteration_counts = {4, 2};
  plan.final_candidate_pool = 50;
  plan.top_k_average = 5;
  int n = 0;
  const Evaluator failing = [&](const MixtureRatio& r) {
    if (++n == 3) throw std::runtime_error("proxy crashed");
    ProxyEvaluation e;
    e.ranking_score = r[0];
    return e;
  };
  const auto expected = sample_simplex(3, 4, plan.rng_seed)[2];
  try {
    run_search(failing, plan, GbdtConfig{}, kIds);
    FAIL("expected EvaluationError");
  } catch (const EvaluationError& e) {
    CHECK(e.ratio() == expected.weights());
    CHECK(std::string(e.what()).find("proxy crashed") != std::string::npos);
  }

  const Evaluator nan_score = [](const MixtureRatio&) {
    ProxyEvaluation e;
    e.ranking_score = NAN;
    return e;
  };
  CHECK_THROWS_AS(run_search(nan_score, plan, GbdtConfig{}, kIds), EvaluationError);
  CHECK_THROWS_AS(run_search(nan_score, plan, GbdtConfig{}, {}), InvalidArgument);
}
