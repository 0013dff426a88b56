#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "demix/tensor_store.hpp"

namespace demix {

// A point on the probability simplex over named candidate datasets.
class MixtureRatio {
 public:
  // Sum tolerance: |sum - 1| <= kSumTolerance is renormalized by exact
  // division, anything larger is rejected.
  static constexpr double kSumTolerance = 1e-9;

  MixtureRatio() = default;
  // Throws InvalidArgument on negative or non-finite weights, a sum off by
  // more than kSumTolerance, or duplicate ids. Empty ids are filled with
  // "d0", "d1", ...
  explicit MixtureRatio(std::vector<double> weights, std::vector<std::string> candidate_ids = {});

  static MixtureRatio one_hot(std::size_t n, std::size_t k, std::vector<std::string> ids = {});
  static MixtureRatio uniform(std::size_t n, std::vector<std::string> ids = {});

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<std::string>& candidate_ids() const { return ids_; }
  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }

  std::string to_string() const;

 private:
  std::vector<double> weights_;
  std::vector<std::string> ids_;
};

enum class MergeMethod { kLinear, kMultiSlerp, kTies, kDare, kBreadcrumbs, kDella };

std::string to_string(MergeMethod method);
MergeMethod parse_merge_method(const std::string& name);

// Method plus hyperparameters. Recognised keys (defaults in parentheses):
//   dare:        p (0.5)                       drop probability, [0, 1)
//   ties:        density (0.2)                 kept fraction, (0, 1]
//   breadcrumbs: top (0.01), bottom (0.85)     masked fractions, [0, 1), sum < 1
//   della:       p_min (0.1), p_max (0.9)      drop range, [0, 1), p_min <= p_max
// linear and multi_slerp take none.
struct MergeSpec {
  MergeMethod method = MergeMethod::kLinear;
  std::map<std::string, double> hyperparams;
  std::uint64_t seed = 0;

  // Throws InvalidArgument for unknown keys or out-of-range values.
  void validate() const;
  double param(const std::string& key) const;  // value or the method default

  // Recognised keys for the method, sorted.
  static std::vector<std::string> keys(MergeMethod method);

  bool is_stochastic() const {
    return method == MergeMethod::kDare || method == MergeMethod::kDella;
  }
};

// Weighted sum of full parameter sets: sum_i ratio_i * components_i.
// A one-hot ratio returns its component bit-exactly, as does merging copies of
// one model under any ratio.
ParameterSet merge_linear(const std::vector<ParameterSet>& components, const MixtureRatio& ratio);

// Serial reference of merge_linear, kept for tests and benchmarks.
ParameterSet merge_linear_serial(const std::vector<ParameterSet>& components,
                                 const MixtureRatio& ratio);

// Dispatches on spec.method. Linear is merge_linear; every other method works
// on deltas against `base` (required) and adds the base back at the end.
ParameterSet merge(const std::vector<ParameterSet>& components, const MixtureRatio& ratio,
                   const MergeSpec& spec, const ParameterSet* base = nullptr);

struct AdditivityReport {
  double relative_error = 0.0;
  std::map<std::string, double> per_tensor_errors;
  // (delta_i, delta_j, delta_union); only filled when a base is supplied.
  std::optional<std::array<double, 3>> delta_magnitudes;
};

inline constexpr double kAdditivityEpsilon = 1e-12;

// relative_error = |D_union - (D_i + D_j)|_2 / max(|D_union|_2, eps)
AdditivityReport check_additivity(const WeightDelta& delta_i, const WeightDelta& delta_j,
                                  const WeightDelta& delta_union,
                                  const ParameterSet* base = nullptr);

}  // namespace demix
