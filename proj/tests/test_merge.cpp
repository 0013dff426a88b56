#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "demix/errors.hpp"
#include "demix/merge.hpp"
#include "test_util.hpp"

using namespace demix;
using demix::testing::make_params;
using demix::testing::random_params;

namespace {

std::vector<double> flat(const ParameterSet& p) {
  std::vector<double> out;
  for (const auto& [name, t] : p) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

double max_abs_diff(const ParameterSet& a, const ParameterSet& b) {
  const auto fa = flat(a);
  const auto fb = flat(b);
  double m = 0.0;
  for (std::size_t i = 0; i < fa.size(); ++i) m = std::max(m, std::abs(fa[i] - fb[i]));
  return m;
}

MixtureRatio random_ratio(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double s = 0.0;
  for (double& x : w) s += (x = rng.exponential());
  for (double& x : w) x /= s;
  return MixtureRatio(w);
}

// Textbook trim / elect / disjoint-merge on one flat vector, written without
// sorting: an entry survives trimming when fewer than `keep` entries beat it
// (larger magnitude, or equal magnitude at a lower index).
std::vector<double> ties_brute_force(const std::vector<std::vector<double>>& deltas,
                                     const std::vector<double>& w, double density) {
  const std::size_t n = deltas[0].size();
  const auto keep = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-12));
  std::vector<std::vector<double>> trimmed = deltas;
  for (auto& d : trimmed) {
    const auto original = d;
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t beaten_by = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double a = std::abs(original[k]);
        const double b = std::abs(original[j]);
        if (a > b || (a == b && k < j)) ++beaten_by;
      }
      if (beaten_by >= keep) d[j] = 0.0;
    }
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double pos = 0.0, neg = 0.0;
    for (std::size_t i = 0; i < trimmed.size(); ++i) {
      const double v = w[i] * trimmed[i][j];
      (v > 0 ? pos : neg) += v;
    }
    const double sign = (pos + neg) >= 0.0 ? 1.0 : -1.0;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < trimmed.size(); ++i) {
      const double v = trimmed[i][j];
      if (v != 0.0 && w[i] != 0.0 && (v > 0.0 ? 1.0 : -1.0) == sign) {
        num += w[i] * v;
        den += w[i];
      }
    }
    out[j] = den > 0 ? num / den : 0.0;
  }
  return out;
}

}  // namespace

TEST_CASE("mixture ratio validation") {
  CHECK_NOTHROW(MixtureRatio({0.5, 0.5}));
  CHECK_THROWS_AS(MixtureRatio({0.5, 0.6}), InvalidArgument);
  CHECK_THROWS_AS(MixtureRatio({1.5, -0.5}), InvalidArgument);
  CHECK_THROWS_AS(MixtureRatio(std::vector<double>{}), InvalidArgument);
  CHECK_THROWS_AS(MixtureRatio({0.5, 0.5}, {"x", "x"}), InvalidArgument);
  CHECK_THROWS_AS(MixtureRatio({0.5, 0.5}, {"x"}), InvalidArgument);

  MixtureRatio near({0.5 + 4e-10, 0.5});
  CHECK(std::abs(near[0] + near[1] - 1.0) < 1e-15);
  CHECK(near.candidate_ids() == std::vector<std::string>{"d0", "d1"});
  CHECK_THROWS_AS(MixtureRatio({0.5 + 2e-9, 0.5}), InvalidArgument);
}

TEST_CASE("linear merge hand cases") {
  SUBCASE("one-hot ratio returns the component bit-exactly") {
    Rng rng(1);
    std::vector<ParameterSet> comps{random_params(rng), random_params(rng), random_params(rng)};
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(bit_equal(merge_linear(comps, MixtureRatio::one_hot(3, k)), comps[k]));
    }
  }
  SUBCASE("identical components merge to themselves") {
    Rng rng(2);
    const auto p = random_params(rng);
    std::vector<ParameterSet> comps{p, p, p};
    for (int trial = 0; trial < 20; ++trial) {
      CHECK(bit_equal(merge_linear(comps, random_ratio(rng, 3)), p));
    }
  }
  SUBCASE("quarter and three quarters") {
    std::vector<ParameterSet> comps{make_params({{"w", {0.0}}}), make_params({{"w", {2.0}}})};
    CHECK(merge_linear(comps, MixtureRatio({0.25, 0.75})).at("w").values[0] == 1.5);
  }
}

TEST_CASE("linear merge errors") {
  std::vector<ParameterSet> comps{make_params({{"w", {0.0}}}), make_params({{"v", {2.0}}})};
  CHECK_THROWS_AS(merge_linear(comps, MixtureRatio({0.5, 0.5})), SchemaError);
  std::vector<ParameterSet> one{make_params({{"w", {0.0}}})};
  CHECK_THROWS_AS(merge_linear(one, MixtureRatio({0.5, 0.5})), InvalidArgument);
  CHECK_THROWS_AS(merge_linear({}, MixtureRatio({1.0})), InvalidArgument);
}

TEST_CASE("linear merge properties on random inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 4;
    std::vector<ParameterSet> comps;
    for (std::size_t i = 0; i < n; ++i) comps.push_back(random_params(rng));
    const auto ratio = random_ratio(rng, n);
    const auto merged = merge_linear(comps, ratio);

    // Convex combination: inside the per-coordinate hull.
    std::vector<std::vector<double>> flats;
    for (const auto& c : comps) flats.push_back(flat(c));
    const auto m = flat(merged);
    for (std::size_t j = 0; j < m.size(); ++j) {
      double lo = flats[0][j], hi = flats[0][j];
      for (const auto& f : flats) {
        lo = std::min(lo, f[j]);
        hi = std::max(hi, f[j]);
      }
      CHECK(m[j] >= lo - 1e-12);
      CHECK(m[j] <= hi + 1e-12);
    }

    // Permutation equivariance.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::rotate(perm.begin(), perm.begin() + 1, perm.end());
    std::vector<ParameterSet> pcomps;
    std::vector<double> pw;
    for (std::size_t i : perm) {
      pcomps.push_back(comps[i]);
      pw.push_back(ratio[i]);
    }
    CHECK(max_abs_diff(merge_linear(pcomps, MixtureRatio(pw)), merged) <= 1e-12);

    // Affine invariance: merging deltas against a base and adding it back.
    const auto base = random_params(rng);
    std::vector<double> expected = flat(base);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = flat(comps[i]);
      const auto b = flat(base);
      for (std::size_t j = 0; j < expected.size(); ++j) expected[j] += ratio[i] * (d[j] - b[j]);
    }
    for (std::size_t j = 0; j < m.size(); ++j) CHECK(std::abs(expected[j] - m[j]) <= 1e-12);
  }
}

TEST_CASE("parallel and serial linear merge agree bitwise on large tensors") {
  Rng rng(8);
  std::vector<ParameterSet> comps;
  for (int i = 0; i < 4; ++i) comps.push_back(random_params(rng, 300, 200));
  const auto ratio = random_ratio(rng, 4);
  CHECK(bit_equal(merge_linear(comps, ratio), merge_linear_serial(comps, ratio)));
}

TEST_CASE("merge dispatch") {
  Rng rng(9);
  const auto base = random_params(rng);
  std::vector<ParameterSet> comps;
  for (int i = 0; i < 3; ++i) comps.push_back(random_params(rng));
  const auto ratio = random_ratio(rng, 3);

  SUBCASE("linear reproduces merge_linear exactly") {
    CHECK(bit_equal(merge(comps, ratio, MergeSpec{}), merge_linear(comps, ratio)));
    CHECK(bit_equal(merge(comps, ratio, MergeSpec{}, &base), merge_linear(comps, ratio)));
  }
  SUBCASE("dare with p = 0 equals the linear merge") {
    for (std::uint64_t seed : {0ULL, 1ULL, 77ULL}) {
      MergeSpec spec{MergeMethod::kDare, {{"p", 0.0}}, seed};
      CHECK(max_abs_diff(merge(comps, ratio, spec, &base), merge_linear(comps, ratio)) <= 1e-12);
    }
  }
  SUBCASE("delta methods need a base") {
    CHECK_THROWS_AS(merge(comps, ratio, MergeSpec{MergeMethod::kTies, {}, 0}), InvalidArgument);
  }
  SUBCASE("hyperparameter validation") {
    CHECK_THROWS_AS(merge(comps, ratio, MergeSpec{MergeMethod::kDare, {{"p", 1.0}}, 0}, &base),
                    InvalidArgument);
    CHECK_THROWS_AS(merge(comps, ratio, MergeSpec{MergeMethod::kTies, {{"density", 0.0}}, 0}, &base),
                    InvalidArgument);
    CHECK_THROWS_AS(merge(comps, ratio, MergeSpec{MergeMethod::kLinear, {{"p", 0.1}}, 0}, &base),
                    InvalidArgument);
    CHECK_THROWS_AS(
        merge(comps, ratio, MergeSpec{MergeMethod::kBreadcrumbs, {{"top", 0.5}, {"bottom", 0.5}}, 0}, &base),
        InvalidArgument);
    CHECK_THROWS_AS(
        merge(comps, ratio, MergeSpec{MergeMethod::kDella, {{"p_min", 0.6}, {"p_max", 0.5}}, 0}, &base),
        InvalidArgument);
    CHECK_THROWS_AS(parse_merge_method("average"), InvalidArgument);
    CHECK(parse_merge_method("multi_slerp") == MergeMethod::kMultiSlerp);
  }
  SUBCASE("stochastic methods are deterministic given the seed") {
    for (auto method : {MergeMethod::kDare, MergeMethod::kDella}) {
      MergeSpec a{method, {}, 5};
      MergeSpec b{method, {}, 6};
      CHECK(bit_equal(merge(comps, ratio, a, &base), merge(comps, ratio, a, &base)));
      CHECK_FALSE(bit_equal(merge(comps, ratio, a, &base), merge(comps, ratio, b, &base)));
    }
  }
}

TEST_CASE("ties matches a brute-force reference") {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 1 + rng.below(10);
    const std::size_t n = 2 + rng.below(3);
    const bool agreeing = trial % 2 == 0;
    const double density = agreeing ? 1.0 : 0.1 + 0.9 * rng.uniform();

    std::vector<double> base_v(len);
    for (double& x : base_v) x = rng.normal();
    ParameterSet base;
    base.insert("w", {len}, base_v);
    std::vector<std::vector<double>> deltas(n, std::vector<double>(len));
    std::vector<double> signs(len);
    for (double& s : signs) s = rng.uniform() < 0.5 ? -1.0 : 1.0;
    std::vector<ParameterSet> comps;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(len);
      for (std::size_t j = 0; j < len; ++j) {
        // Dyadic magnitudes keep base + delta - base exact.
        const double mag = std::ldexp(static_cast<double>(1 + rng.below(64)), -6);
        deltas[i][j] = agreeing ? signs[j] * mag : (rng.uniform() < 0.5 ? -mag : mag);
        v[j] = base_v[j] + deltas[i][j];
        deltas[i][j] = v[j] - base_v[j];
      }
      ParameterSet c;
      c.insert("w", {len}, v);
      comps.push_back(std::move(c));
    }
    const auto ratio = random_ratio(rng, n);
    MergeSpec spec{MergeMethod::kTies, {{"density", density}}, 0};
    const auto got = merge(comps, ratio, spec, &base).at("w").values;
    const auto ref = ties_brute_force(deltas, ratio.weights(), density);
    for (std::size_t j = 0; j < len; ++j) {
      CHECK(got[j] == doctest::Approx(base_v[j] + ref[j]).epsilon(1e-12));
    }
    if (agreeing) {
      // Every coordinate agrees in sign and is nonzero: plain weighted sum.
      const auto lin = merge_linear(comps, ratio).at("w").values;
      for (std::size_t j = 0; j < len; ++j) CHECK(std::abs(got[j] - lin[j]) <= 1e-12);
    }
  }
}

TEST_CASE("ties elects positive on an exact tie") {
  ParameterSet base = make_params({{"w", {0.0}}});
  std::vector<ParameterSet> comps{make_params({{"w", {1.0}}}), make_params({{"w", {-1.0}}})};
  MergeSpec spec{MergeMethod::kTies, {{"density", 1.0}}, 0};
  CHECK(merge(comps, MixtureRatio({0.5, 0.5}), spec, &base).at("w").values[0] == 1.0);
}

TEST_CASE("breadcrumbs masks the largest and smallest entries") {
  std::vector<double> d(100);
  for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<double>(j + 1);
  ParameterSet base;
  base.insert("w", {100}, std::vector<double>(100, 0.0));
  ParameterSet comp;
  comp.insert("w", {100}, d);
  MergeSpec spec{MergeMethod::kBreadcrumbs, {}, 0};
  const auto out = merge({comp, base}, MixtureRatio({1.0, 0.0}), spec, &base).at("w").values;
  // top 1% -> entry 100 removed; bottom 85% -> entries 1..85 removed.
  for (std::size_t j = 0; j < 100; ++j) {
    const bool kept = j + 1 > 85 && j + 1 < 100;
    CHECK(out[j] == (kept ? d[j] : 0.0));
  }
}

TEST_CASE("della keeps large entries more often and rescales survivors") {
  const std::size_t n = 2000;
  std::vector<double> d(n);
  for (std::size_t j = 0; j < n; ++j) d[j] = static_cast<double>(j + 1);
  ParameterSet base;
  base.insert("w", {n}, std::vector<double>(n, 0.0));
  ParameterSet comp;
  comp.insert("w", {n}, d);
  MergeSpec spec{MergeMethod::kDella, {}, 3};
  const auto out = merge({comp}, MixtureRatio({1.0}), spec, &base).at("w").values;
  std::size_t kept_small = 0, kept_large = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (out[j] == 0.0) continue;
    // Survivor rescaled by 1 / (1 - p_j), p_j from 0.9 (smallest) to 0.1.
    const double p = 0.9 - 0.8 * static_cast<double>(j) / static_cast<double>(n - 1);
    CHECK(out[j] == doctest::Approx(d[j] / (1.0 - p)).epsilon(1e-12));
    (j < n / 4 ? kept_small : kept_large) += j < n / 4 || j >= 3 * n / 4;
  }
  CHECK(kept_large > 3 * kept_small);
}

TEST_CASE("multi_slerp preserves the weighted norm") {
  Rng rng(12);
  const auto base = random_params(rng);
  const auto comp = random_params(rng);
  MergeSpec spec{MergeMethod::kMultiSlerp, {}, 0};

  SUBCASE("single component is returned") {
    CHECK(max_abs_diff(merge({comp}, MixtureRatio({1.0}), spec, &base), comp) <= 1e-12);
  }
  SUBCASE("parallel deltas keep direction with mean norm") {
    ParameterSet b = make_params({{"w", {0.0, 0.0}}});
    std::vector<ParameterSet> comps{make_params({{"w", {3.0, 4.0}}}), make_params({{"w", {6.0, 8.0}}})};
    const auto out = merge(comps, MixtureRatio({0.5, 0.5}), spec, &b).at("w").values;
    // Norms 5 and 10 -> 7.5 along (0.6, 0.8).
    CHECK(out[0] == doctest::Approx(4.5));
    CHECK(out[1] == doctest::Approx(6.0));
  }
  SUBCASE("zero-norm deltas are dropped and weights renormalized") {
    ParameterSet b = make_params({{"w", {1.0, 1.0}}});
    std::vector<ParameterSet> comps{make_params({{"w", {1.0, 1.0}}}), make_params({{"w", {4.0, 5.0}}})};
    const auto out = merge(comps, MixtureRatio({0.9, 0.1}), spec, &b).at("w").values;
    CHECK(out[0] == doctest::Approx(4.0));
    CHECK(out[1] == doctest::Approx(5.0));
  }
  SUBCASE("orthogonal unit deltas") {
    ParameterSet b = make_params({{"w", {0.0, 0.0}}});
    std::vector<ParameterSet> comps{make_params({{"w", {1.0, 0.0}}}), make_params({{"w", {0.0, 1.0}}})};
    const auto out = merge(comps, MixtureRatio({0.5, 0.5}), spec, &b).at("w").values;
    CHECK(out[0] == doctest::Approx(std::sqrt(0.5)));
    CHECK(out[1] == doctest::Approx(std::sqrt(0.5)));
  }
}

TEST_CASE("check_additivity") {
  const auto base = make_params({{"w", {1.0}}});
  const auto id = fingerprint(base);
  SUBCASE("exactly additive") {
    WeightDelta a{make_params({{"w", {0.5}}}), id};
    WeightDelta b{make_params({{"w", {0.25}}}), id};
    WeightDelta u{make_params({{"w", {0.75}}}), id};
    const auto r = check_additivity(a, b, u, &base);
    CHECK(r.relative_error == 0.0);
    REQUIRE(r.delta_magnitudes.has_value());
    CHECK((*r.delta_magnitudes)[0] == doctest::Approx(0.5 / 2.5));
  }
  SUBCASE("hand case 0.2 / 2.2") {
    WeightDelta a{make_params({{"w", {1.0}}}), id};
    WeightDelta u{make_params({{"w", {2.2}}}), id};
    const auto r = check_additivity(a, a, u);
    CHECK(r.relative_error == doctest::Approx(0.2 / 2.2).epsilon(1e-12));
    CHECK(r.per_tensor_errors.at("w") == doctest::Approx(0.0909090909).epsilon(1e-9));
    CHECK_FALSE(r.delta_magnitudes.has_value());
  }
  SUBCASE("zero union uses the epsilon floor") {
    WeightDelta a{make_params({{"w", {1e-13}}}), id};
    WeightDelta z{make_params({{"w", {0.0}}}), id};
    CHECK(check_additivity(a, z, z).relative_error == doctest::Approx(0.1));
  }
  SUBCASE("base mismatch") {
    WeightDelta a{make_params({{"w", {1.0}}}), id};
    WeightDelta b{make_params({{"w", {1.0}}}), "other"};
    CHECK_THROWS_AS(check_additivity(a, b, a), SchemaError);
    WeightDelta c{make_params({{"v", {1.0}}}), id};
    CHECK_THROWS_AS(check_additivity(a, c, a), SchemaError);
  }
}
