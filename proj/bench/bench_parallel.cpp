// Serial reference vs OpenMP kernel timings. Every pair is also checked for
// equal output, so a speedup never comes from computing something else.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "demix/dedup.hpp"
#include "demix/gbdt.hpp"
#include "demix/kernels.hpp"
#include "demix/merge.hpp"
#include "demix/random.hpp"
#include "demix/search.hpp"

using namespace demix;

namespace {

double median_ms(int reps, const std::function<void()>& f) {
  std::vector<double> t;
  for (int r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

struct Row {
  std::string name;
  double serial_ms;
  double parallel_ms;
  bool equal;
};

void print(const Row& r) {
  std::printf("%-28s %10.2f %10.2f %8.2fx   %s\n", r.name.c_str(), r.serial_ms, r.parallel_ms,
              r.serial_ms / std::max(r.parallel_ms, 1e-9), r.equal ? "same output" : "OUTPUT DIFFERS");
}

std::vector<double> normals(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernels"};
  std::size_t values = 1 << 22;
  std::size_t components = 8;
  std::size_t pool = 100000;
  std::size_t docs = 2000;
  int reps = 5;
  app.add_option("--values", values, "Values per component tensor");
  app.add_option("--components", components, "Components merged");
  app.add_option("--pool", pool, "Points scored by the predictor");
  app.add_option("--docs", docs, "Documents signed by MinHash");
  app.add_option("--reps", reps, "Repetitions (median reported)");
  CLI11_PARSE(app, argc, argv);

  std::printf("threads available: %d\n\n", kernels::max_threads());
  std::printf("%-28s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");
  bool all_equal = true;
  Rng rng(2024);

  {
    std::vector<std::vector<double>> xs;
    for (std::size_t i = 0; i < components; ++i) xs.push_back(normals(rng, values));
    std::vector<std::span<const double>> spans(xs.begin(), xs.end());
    std::vector<double> w(components, 1.0 / static_cast<double>(components));
    std::vector<double> a(values), b(values);
    Row r{"anchored_weighted_sum", 0, 0, false};
    r.serial_ms = median_ms(reps, [&] { kernels::anchored_weighted_sum_serial(spans, w, 0, a); });
    r.parallel_ms = median_ms(reps, [&] { kernels::anchored_weighted_sum(spans, w, 0, b); });
    r.equal = a == b;
    print(r);
    all_equal &= r.equal;

    double s1 = 0, s2 = 0;
    Row q{"sum_abs_diff", 0, 0, false};
    q.serial_ms = median_ms(reps, [&] { s1 = kernels::sum_abs_diff_serial(xs[0], xs[1]); });
    q.parallel_ms = median_ms(reps, [&] { s2 = kernels::sum_abs_diff(xs[0], xs[1]); });
    // chunked reduction: equal up to reassociation
    q.equal = std::abs(s1 - s2) <= 1e-9 * std::abs(s1);
    print(q);
    all_equal &= q.equal;
  }

  {
    std::vector<ParameterSet> comps;
    for (std::size_t i = 0; i < components; ++i) {
      ParameterSet p;
      p.insert("w", {values / 4, 4}, normals(rng, values));
      comps.push_back(std::move(p));
    }
    const auto ratio = sample_simplex(components, 1, 7).front();
    ParameterSet a, b;
    Row r{"merge_linear", 0, 0, false};
    r.serial_ms = median_ms(reps, [&] { a = merge_linear_serial(comps, ratio); });
    r.parallel_ms = median_ms(reps, [&] { b = merge_linear(comps, ratio); });
    r.equal = bit_equal(a, b);
    print(r);
    all_equal &= r.equal;
  }

  {
    const auto train = sample_simplex(3, 64, 11);
    std::vector<double> y;
    for (const auto& t : train) y.push_back(std::abs(t[0] - 0.6) + std::abs(t[1] - 0.3) + std::abs(t[2] - 0.1));
    const auto model = fit_predictor(train, y, GbdtConfig{});
    std::vector<double> rows;
    for (const auto& p : sample_simplex(3, pool, 12)) rows.insert(rows.end(), p.weights().begin(), p.weights().end());
    std::vector<double> a, b;
    Row r{"gbdt predict_batch", 0, 0, false};
    r.serial_ms = median_ms(reps, [&] { a = model.predict_batch_serial(rows); });
    r.parallel_ms = median_ms(reps, [&] { b = model.predict_batch(rows); });
    r.equal = a == b;
    print(r);
    all_equal &= r.equal;
  }

  {
    std::vector<ShingleSet> sets;
    for (std::size_t d = 0; d < docs; ++d) {
      std::string text;
      for (int i = 0; i < 300; ++i) text += "t" + std::to_string(rng.below(5000)) + ' ';
      sets.push_back(shingle(text, kShingleSize, "doc" + std::to_string(d)));
    }
    std::vector<MinHashSignature> a, b;
    Row r{"minhash_all", 0, 0, false};
    r.serial_ms = median_ms(reps, [&] { a = minhash_all_serial(sets, 5); });
    r.parallel_ms = median_ms(reps, [&] { b = minhash_all(sets, 5); });
    r.equal = a.size() == b.size();
    for (std::size_t i = 0; r.equal && i < a.size(); ++i) r.equal = a[i].values == b[i].values;
    print(r);
    all_equal &= r.equal;
  }

  return all_equal ? 0 : 1;
}
