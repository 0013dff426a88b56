// Acceptance harness: the ten criteria, one PASS/FAIL line each with the
// measured values and wall time. Exit status is the number of failures.
//
//   acceptance <path to demix binary> [scratch dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "demix/dedup.hpp"
#include "demix/merge.hpp"
#include "demix/metrics.hpp"
#include "demix/random.hpp"
#include "demix/search.hpp"
#include "demix/tensor_store.hpp"
#include "demix/toy_lab.hpp"

#include "test_util.hpp"

using namespace demix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome merge_identities() {
  Rng rng(101);
  int one_hot_fail = 0, identical_fail = 0;
  double dare_worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    const auto base = testing::random_params(rng);
    std::vector<ParameterSet> comps;
    for (std::size_t i = 0; i < k; ++i) comps.push_back(testing::random_params(rng));
    for (std::size_t i = 0; i < k; ++i) {
      one_hot_fail += !bit_equal(merge_linear(comps, MixtureRatio::one_hot(k, i)), comps[i]);
    }
    const auto ratio = sample_simplex(k, 1, rng).front();
    const std::vector<ParameterSet> copies(k, comps[0]);
    identical_fail += !bit_equal(merge_linear(copies, ratio), comps[0]);

    MergeSpec dare{MergeMethod::kDare, {{"p", 0.0}}, rng.next_u64()};
    const auto a = merge(comps, ratio, dare, &base);
    const auto b = merge_linear(comps, ratio);
    for (const auto& [name, t] : b) {
      for (std::size_t j = 0; j < t.values.size(); ++j) {
        dare_worst = std::max(dare_worst, std::abs(a.at(name).values[j] - t.values[j]));
      }
    }
  }
  return {one_hot_fail == 0 && identical_fail == 0 && dare_worst <= 1e-12,
          fmt("one-hot mismatches %d, identical-merge mismatches %d, max |dare(p=0) - linear| %.3g",
              one_hot_fail, identical_fail, dare_worst)};
}

Outcome delta_exactness() {
  Rng rng(202);
  // Dyadic grid: differences are representable, so the inverse is bit-exact.
  int grid_fail = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto grid = [&] {
      std::vector<double> v(1 + rng.below(64));
      for (double& x : v) {
        x = std::ldexp(static_cast<double>(static_cast<std::int64_t>(rng.below(1ULL << 31)) - (1LL << 30)), -20);
      }
      return v;
    };
    ParameterSet base, trained;
    auto b = grid();
    auto t = grid();
    t.resize(b.size());
    base.insert("w", {b.size()}, b);
    trained.insert("w", {t.size()}, t);
    grid_fail += !bit_equal(apply_delta(base, compute_delta(trained, base)), trained);
  }
  // Arbitrary doubles: exact up to the one rounding of the subtraction.
  double worst_ulps = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double scale = std::pow(10.0, static_cast<double>(trial % 9) - 4.0);
    const auto base = testing::random_params(rng, 3, 4, scale);
    const auto trained = testing::random_params(rng, 3, 4, scale);
    const auto back = apply_delta(base, compute_delta(trained, base));
    for (const auto& [name, t] : trained) {
      for (std::size_t k = 0; k < t.values.size(); ++k) {
        const double unit = std::numeric_limits<double>::epsilon() *
                            std::max(std::abs(t.values[k]), std::abs(base.at(name).values[k]));
        worst_ulps = std::max(worst_ulps, std::abs(back.at(name).values[k] - t.values[k]) / unit);
      }
    }
  }
  const auto p = testing::make_params({{"w", {0.3, -4.0}}, {"b", {2.0}}});
  const double self = delta_magnitude(p, p);
  const double hand = delta_magnitude(testing::make_params({{"w", {2.0}}}), testing::make_params({{"w", {1.0}}}));
  return {grid_fail == 0 && worst_ulps <= 2.0 && self == 0.0 && std::abs(hand - 1.0 / 3.0) <= 1e-15,
          fmt("grid inverse mismatches %d/1000, arbitrary worst %.2f eps (<= 2), delta(P,P) = %g, "
              "hand case %.17g",
              grid_fail, worst_ulps, self, hand)};
}

Outcome delta_additivity() {
  double worst = 0.0, mean = 0.0;
  for (int s = 0; s < 20; ++s) {
    LabConfig cfg;
    cfg.n_domains = 2;
    const auto lab = make_domains(cfg, 1000 + static_cast<std::uint64_t>(s));
    LabTrainingConfig tc;
    tc.seed = static_cast<std::uint64_t>(s);
    const auto base = train_base(lab, tc);
    const DatasetMixture di{{&lab.candidates[0], 1.0}};
    const DatasetMixture dj{{&lab.candidates[1], 1.0}};
    const DatasetMixture du{{&lab.candidates[0], 0.5}, {&lab.candidates[1], 0.5}};
    const double L = std::max({lipschitz_constant(di, tc.family), lipschitz_constant(dj, tc.family),
                               lipschitz_constant(du, tc.family)});
    TrainConfig t;
    t.steps = 200;
    t.step_size = 0.1 / L;
    t.batch_size = 0;
    const auto ti = train(di, base, t);
    const auto tj = train(dj, base, t);
    t.steps = 400;  // the union carries both budgets
    const auto tu = train(du, base, t);
    const auto r = check_additivity(compute_delta(ti, base), compute_delta(tj, base), compute_delta(tu, base));
    worst = std::max(worst, r.relative_error);
    mean += r.relative_error / 20.0;
  }
  return {worst <= 0.15, fmt("worst relative error %.4f, mean %.4f over 20 pairs (<= 0.15)", worst, mean)};
}

// Rank by counting, then textbook Pearson.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < v.size(); ++j) {
        if (v[j] < v[i]) ++less;
        if (j != i && v[j] == v[i]) ++equal;
      }
      r[i] = 1.0 + less + 0.5 * equal;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(rx.size());
  my /= static_cast<double>(ry.size());
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

Outcome metric_oracles() {
  Rng rng(404);
  int checked = 0, mismatches = 0;
  while (checked < 1000) {
    const std::size_t n = 2 + rng.below(40);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(7));
      y[i] = static_cast<double>(rng.below(7));
    }
    auto flat = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double a) { return a == v[0]; });
    };
    if (flat(x) || flat(y)) continue;
    mismatches += spearman_rho(x, y) != spearman_oracle(x, y);
    ++checked;
  }
  const double documented = spearman_rho(std::vector<double>{1, 2, 3, 4, 5}, std::vector<double>{2, 1, 4, 3, 5});

  int rank_sum_fail = 0;
  const std::vector<std::pair<std::string, std::string>> benches{
      {"g1", "general"}, {"g2", "general"}, {"m1", "math"}, {"c1", "code"}};
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(20));
    ScoreTable t;
    for (const auto& [b, d] : benches) t.domain_of[b] = d;
    for (int m = 0; m < k; ++m) {
      for (const auto& [b, d] : benches) t.rows["m" + std::to_string(m)][b] = static_cast<double>(rng.below(5));
    }
    std::map<std::string, double> sums;
    for (const auto& model : t.models()) {
      for (const auto& [d, r] : macro_average_rank(t, model).per_domain) sums[d] += r;
    }
    for (const auto& [d, s] : sums) rank_sum_fail += s != k * (k + 1) / 2.0;
  }
  return {mismatches == 0 && documented == 0.8 && rank_sum_fail == 0,
          fmt("oracle mismatches %d/1000 (bitwise), documented case %.17g, rank-sum violations %d",
              mismatches, documented, rank_sum_fail)};
}

struct Consistency {
  double rho = 0.0;
  double recovery = 0.0;
};

Consistency lab_consistency(std::uint64_t seed, double beta, std::size_t steps) {
  const auto lab = make_domains(LabConfig{}, seed);
  LabTrainingConfig tc;
  tc.seed = seed;
  tc.general_mix_beta = beta;
  tc.steps = steps;
  const auto prepared = prepare_components(lab, tc);
  std::vector<std::string> ids;
  for (const auto& c : lab.candidates) ids.push_back(c.id);
  const auto ratios = sample_simplex(ids.size(), 24, derive_seed(seed, fnv1a64("ratios")), ids);
  const auto reference = build_reference_set(lab, prepared.base, ratios, tc);
  const auto proxy = build_proxy_set(lab, prepared, ratios);
  const auto r = consistency_report(reference, proxy);
  return {r.macro_avg_rho, r.capability_recovery};
}

Outcome proxy_consistency() {
  const auto full = lab_consistency(500, 0.5, 1000);
  const auto short_budget = lab_consistency(500, 0.5, 250);
  const bool pass = full.rho >= 0.7 && full.recovery >= 0.8 && short_budget.rho >= 0.7 &&
                    short_budget.recovery >= 0.8;
  return {pass, fmt("1000 steps: macro rho %.4f, recovery %.4f; 250 steps: macro rho %.4f, recovery %.4f "
                    "(floors 0.7 / 0.8)",
                    full.rho, full.recovery, short_budget.rho, short_budget.recovery)};
}

Outcome search_recovery() {
  const std::vector<double> target{0.6, 0.3, 0.1};
  const Evaluator ev = [&](const MixtureRatio& r) {
    ProxyEvaluation e;
    for (std::size_t i = 0; i < 3; ++i) e.ranking_score += std::abs(r[i] - target[i]);
    return e;
  };
  int within = 0;
  bool budget_ok = true;
  std::string dists;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SamplePlan plan;  // 64/32/16, pool 100000, top-128
    plan.rng_seed = seed;
    const auto result = run_search(ev, plan, GbdtConfig{}, {"a", "b", "c"});
    double d = 0.0;
    for (std::size_t i = 0; i < 3; ++i) d += std::abs(result.mixture[i] - target[i]);
    within += d <= 0.2;
    budget_ok &= result.transcript.entries.size() == 112;
    dists += fmt("%s%.3f", seed ? " " : "", d);
  }
  return {within >= 9 && budget_ok,
          fmt("%d/10 seeds within L1 0.2 (need 9), 112 evaluations each: %s; L1 = [%s]", within,
              budget_ok ? "yes" : "no", dists.c_str())};
}

Outcome gbdt_quality() {
  const auto f = [](const MixtureRatio& r) { return 3.0 * r[0] + r[1]; };
  double worst = 1.0;
  std::string values;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train = sample_simplex(3, 64, 700 + seed * 2);
    const auto test = sample_simplex(3, 32, 701 + seed * 2);
    std::vector<double> y;
    for (const auto& r : train) y.push_back(f(r));
    GbdtConfig cfg;  // lr 0.02, 300 rounds, depth 3
    const auto p = fit_predictor(train, y, cfg);
    double mean = 0.0;
    for (const auto& x : test) mean += f(x) / 32.0;
    double res = 0.0, tot = 0.0;
    for (const auto& x : test) {
      res += std::pow(f(x) - predict(p, x), 2);
      tot += std::pow(f(x) - mean, 2);
    }
    const double r2 = 1.0 - res / tot;
    worst = std::min(worst, r2);
    values += fmt("%s%.4f", seed ? " " : "", r2);
  }
  return {worst >= 0.9, fmt("held-out R^2 on 5 splits: [%s], worst %.4f (>= 0.9)", values.c_str(), worst)};
}

Outcome dedup_scurve() {
  Rng rng(808);
  auto overlap = [&](std::size_t shared, std::size_t total) {
    ShingleSet a, b;
    const std::size_t only = (total - shared) / 2;
    for (std::size_t i = 0; i < shared; ++i) {
      const auto x = rng.next_u64();
      a.shingles.push_back(x);
      b.shingles.push_back(x);
    }
    for (std::size_t i = 0; i < only; ++i) a.shingles.push_back(rng.next_u64());
    for (std::size_t i = 0; i < total - shared - only; ++i) b.shingles.push_back(rng.next_u64());
    std::sort(a.shingles.begin(), a.shingles.end());
    std::sort(b.shingles.begin(), b.shingles.end());
    return std::pair{a, b};
  };
  bool curve_ok = true;
  std::string points;
  for (double j : {0.7, 0.85, 0.95}) {
    const auto shared = static_cast<std::size_t>(std::lround(j * 200));
    int paired = 0;
    for (int t = 0; t < 500; ++t) {
      const auto [a, b] = overlap(shared, 200);
      const HashFamily family(rng.next_u64());
      paired += !lsh_candidate_pairs({minhash(a, family), minhash(b, family)}).empty();
    }
    const double got = paired / 500.0, want = lsh_pair_probability(j);
    curve_ok &= std::abs(got - want) <= 0.05;
    points += fmt("%sJ=%.2f %.3f vs %.3f", points.empty() ? "" : ", ", j, got, want);
  }

  std::vector<Document> docs;
  for (int i = 0; i < 30; ++i) {
    std::string text;
    for (int w = 0; w < 60; ++w) text += "w" + std::to_string(rng.below(100000)) + ' ';
    docs.push_back({"d" + std::to_string(i), text});
    docs.push_back({"copy" + std::to_string(i), text});
  }
  int unclustered = 0;
  for (auto mode : {DedupMode::kExact, DedupMode::kFuzzy, DedupMode::kBoth}) {
    const auto r = dedup_corpus(docs, mode, 9);
    for (int i = 0; i < 30; ++i) unclustered += r.reasons.count("copy" + std::to_string(i)) == 0;
  }
  std::string text26;
  for (int w = 0; w < 26; ++w) text26 += "tok" + std::to_string(w) + ' ';
  const auto n26 = shingle(text26).shingles.size();
  return {curve_ok && unclustered == 0 && n26 == 3,
          fmt("%s (+-0.05); unclustered exact copies %d; 26-token shingles %zu", points.c_str(),
              unclustered, n26)};
}

Outcome beta_ablation() {
  double with = 0.0, without = 0.0;
  std::string per_seed;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto a = lab_consistency(500 + s, 0.5, 1000);
    const auto b = lab_consistency(500 + s, 0.0, 1000);
    with += a.rho / 3.0;
    without += b.rho / 3.0;
    per_seed += fmt("%sseed %llu: %.4f vs %.4f", s ? ", " : "", static_cast<unsigned long long>(500 + s), a.rho,
                    b.rho);
  }
  return {with >= without,
          fmt("mean macro rho beta=0.5 %.4f >= beta=0 %.4f (%s)", with, without, per_seed.c_str())};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing " + p.string() + ">";
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome end_to_end(const std::string& demix, const fs::path& scratch) {
  if (demix.empty()) return {false, "no demix binary given"};
  fs::remove_all(scratch);
  const std::string config = "[run]\nseed = 2024\noutput_root = runs\n";
  std::vector<fs::path> run_dirs;
  for (const char* name : {"first", "second"}) {
    const auto dir = scratch / name;
    fs::create_directories(dir);
    std::ofstream(dir / "exp.cfg") << config;
    const auto out = dir / "stdout.txt";
    const std::string cmd = "'" + demix + "' run --quiet --config '" + (dir / "exp.cfg").string() + "' > '" +
                            out.string() + "'";
    if (std::system(cmd.c_str()) != 0) return {false, std::string("demix run failed in ") + name};
    auto manifest = slurp(out);
    while (!manifest.empty() && (manifest.back() == '\n' || manifest.back() == '\r')) manifest.pop_back();
    run_dirs.push_back(fs::path(manifest).parent_path());
  }
  int identical = 0;
  std::string sizes;
  for (const char* f : {"report.json", "report.txt", "search/transcript.jsonl"}) {
    const auto a = slurp(run_dirs[0] / f);
    const auto b = slurp(run_dirs[1] / f);
    identical += a == b && a.rfind("<missing", 0) != 0;
    sizes += fmt("%s%s %zu B", sizes.empty() ? "" : ", ", f, a.size());
  }
  return {identical == 3, fmt("%d/3 files byte-identical across two runs (%s)", identical, sizes.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string demix = argc > 1 ? argv[1] : "";
  const fs::path scratch = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "demix_acceptance";

  struct Criterion {
    const char* name;
    double limit_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"merge identities", 10, merge_identities},
      {"delta-calculus exactness", 10, delta_exactness},
      {"delta additivity", 60, delta_additivity},
      {"metric oracles", 30, metric_oracles},
      {"proxy consistency", 300, proxy_consistency},
      {"search recovers a known optimum", 120, search_recovery},
      {"GBDT quality", 30, gbdt_quality},
      {"dedup S-curve", 120, dedup_scurve},
      {"beta ablation direction", 600, beta_ablation},
      {"end-to-end determinism", 600, [&] { return end_to_end(demix, scratch); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& c = criteria[i];
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = o.pass && secs <= c.limit_s;
    failures += !pass;
    std::printf("[%s] %2zu %-32s %s (%.2f s, limit %.0f s)\n", pass ? "PASS" : "FAIL", i + 1, c.name,
                o.detail.c_str(), secs, c.limit_s);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures;
}
