#include "demix/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace demix::kernels {

namespace {

// Below this many coordinates the fork/join cost outweighs the work.
constexpr std::ptrdiff_t kParallelThreshold = 1 << 14;
constexpr std::size_t kChunk = 4096;

inline double anchored_at(Inputs inputs, std::span<const double> weights, std::size_t anchor,
                          std::size_t j) {
  const double base = inputs[anchor][j];
  double acc = base;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i == anchor || weights[i] == 0.0) continue;
    acc += weights[i] * (inputs[i][j] - base);
  }
  return acc;
}

inline double offset_at(std::span<const double> offset, Inputs inputs,
                        std::span<const double> weights, std::size_t j) {
  double acc = offset[j];
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (weights[i] == 0.0) continue;
    acc += weights[i] * inputs[i][j];
  }
  return acc;
}

template <typename ChunkFn>
double chunked_reduce(std::size_t n, ChunkFn chunk_sum) {
  const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(n_chunks, 0.0);
  const auto signed_chunks = static_cast<std::ptrdiff_t>(n_chunks);
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(n) > kParallelThreshold)
  for (std::ptrdiff_t c = 0; c < signed_chunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk;
    const std::size_t hi = std::min(n, lo + kChunk);
    partial[static_cast<std::size_t>(c)] = chunk_sum(lo, hi);
  }
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace

void anchored_weighted_sum(Inputs inputs, std::span<const double> weights, std::size_t anchor,
                           std::span<double> out) {
  assert(inputs.size() == weights.size() && anchor < inputs.size());
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    out[static_cast<std::size_t>(j)] =
        anchored_at(inputs, weights, anchor, static_cast<std::size_t>(j));
  }
}

void anchored_weighted_sum_serial(Inputs inputs, std::span<const double> weights,
                                  std::size_t anchor, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double base = inputs[anchor][j];
    double acc = base;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (i == anchor || weights[i] == 0.0) continue;
      acc += weights[i] * (inputs[i][j] - base);
    }
    out[j] = acc;
  }
}

void offset_weighted_sum(std::span<const double> offset, Inputs inputs,
                         std::span<const double> weights, std::span<double> out) {
  assert(inputs.size() == weights.size());
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    out[static_cast<std::size_t>(j)] = offset_at(offset, inputs, weights, static_cast<std::size_t>(j));
  }
}

void offset_weighted_sum_serial(std::span<const double> offset, Inputs inputs,
                                std::span<const double> weights, std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = offset[j];
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (weights[i] == 0.0) continue;
      acc += weights[i] * inputs[i][j];
    }
    out[j] = acc;
  }
}

void subtract(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    const auto k = static_cast<std::size_t>(j);
    out[k] = a[k] - b[k];
  }
}

void add(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (n > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    const auto k = static_cast<std::size_t>(j);
    out[k] = a[k] + b[k];
  }
}

double sum_abs(std::span<const double> x) {
  return chunked_reduce(x.size(), [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += std::abs(x[j]);
    return s;
  });
}

double sum_abs_serial(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += std::abs(v);
  return s;
}

double sum_abs_diff(std::span<const double> a, std::span<const double> b) {
  return chunked_reduce(a.size(), [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += std::abs(a[j] - b[j]);
    return s;
  });
}

double sum_abs_diff_serial(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += std::abs(a[j] - b[j]);
  return s;
}

double sum_squares(std::span<const double> x) {
  return chunked_reduce(x.size(), [&](std::size_t lo, std::size_t hi) {
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += x[j] * x[j];
    return s;
  });
}

double sum_squares_serial(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

bool all_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace demix::kernels
