#pragma once

// Data-parallel inner loops shared by the merge engine and tensor store.
//
// Each kernel has an OpenMP version and a `_serial` reference. The element-wise
// kernels evaluate the same expression per coordinate in both versions, so
// their outputs are bitwise identical for any thread count. The reductions
// sum fixed-size chunks and then combine the chunk partials in order, which
// makes them deterministic too, though not bitwise equal to the plain serial
// loop.

#include <cstddef>
#include <span>
#include <vector>

namespace demix::kernels {

using Inputs = std::span<const std::span<const double>>;

// out[j] = x_a[j] + sum_{i != a, w_i != 0} w_i * (x_i[j] - x_a[j])
// where a = anchor. Equals sum_i w_i x_i[j] when the weights sum to one, and
// returns x_a exactly when every other input is identical to it or has zero
// weight.
void anchored_weighted_sum(Inputs inputs, std::span<const double> weights, std::size_t anchor,
                           std::span<double> out);
void anchored_weighted_sum_serial(Inputs inputs, std::span<const double> weights,
                                  std::size_t anchor, std::span<double> out);

// out[j] = offset[j] + sum_i w_i * x_i[j]; terms with w_i == 0 are skipped.
void offset_weighted_sum(std::span<const double> offset, Inputs inputs,
                         std::span<const double> weights, std::span<double> out);
void offset_weighted_sum_serial(std::span<const double> offset, Inputs inputs,
                                std::span<const double> weights, std::span<double> out);

// out[j] = a[j] - b[j] and out[j] = a[j] + b[j]
void subtract(std::span<const double> a, std::span<const double> b, std::span<double> out);
void add(std::span<const double> a, std::span<const double> b, std::span<double> out);

double sum_abs(std::span<const double> x);
double sum_abs_serial(std::span<const double> x);
double sum_abs_diff(std::span<const double> a, std::span<const double> b);
double sum_abs_diff_serial(std::span<const double> a, std::span<const double> b);
double sum_squares(std::span<const double> x);
double sum_squares_serial(std::span<const double> x);

bool all_finite(std::span<const double> x);

// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();

}  // namespace demix::kernels
