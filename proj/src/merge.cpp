#include "demix/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "demix/errors.hpp"
#include "demix/kernels.hpp"
#include "demix/random.hpp"

namespace demix {

// ---------------------------------------------------------------------------
// MixtureRatio

MixtureRatio::MixtureRatio(std::vector<double> weights, std::vector<std::string> candidate_ids)
    : weights_(std::move(weights)), ids_(std::move(candidate_ids)) {
  if (weights_.empty()) throw InvalidArgument("mixture ratio: no weights");
  if (ids_.empty()) {
    for (std::size_t i = 0; i < weights_.size(); ++i) ids_.push_back("d" + std::to_string(i));
  }
  if (ids_.size() != weights_.size()) {
    throw InvalidArgument("mixture ratio: " + std::to_string(weights_.size()) + " weights but " +
                          std::to_string(ids_.size()) + " candidate ids");
  }
  std::vector<std::string> sorted = ids_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("mixture ratio: duplicate candidate id");
  }
  double sum = 0.0;
  for (double w : weights_) {
    if (!std::isfinite(w) || w < 0.0) {
      throw InvalidArgument("mixture ratio: weights must be finite and nonnegative");
    }
    sum += w;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    std::ostringstream os;
    os.precision(17);
    os << "mixture ratio: weights sum to " << sum << ", not 1";
    throw InvalidArgument(os.str());
  }
  if (sum != 1.0) {
    for (double& w : weights_) w /= sum;
  }
}

MixtureRatio MixtureRatio::one_hot(std::size_t n, std::size_t k, std::vector<std::string> ids) {
  std::vector<double> w(n, 0.0);
  w.at(k) = 1.0;
  return MixtureRatio(std::move(w), std::move(ids));
}

MixtureRatio MixtureRatio::uniform(std::size_t n, std::vector<std::string> ids) {
  return MixtureRatio(std::vector<double>(n, 1.0 / static_cast<double>(n)), std::move(ids));
}

std::string MixtureRatio::to_string() const {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    os << (i ? ", " : "") << ids_[i] << '=' << weights_[i];
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// MergeSpec

std::string to_string(MergeMethod method) {
  switch (method) {
    case MergeMethod::kLinear: return "linear";
    case MergeMethod::kMultiSlerp: return "multi_slerp";
    case MergeMethod::kTies: return "ties";
    case MergeMethod::kDare: return "dare";
    case MergeMethod::kBreadcrumbs: return "breadcrumbs";
    case MergeMethod::kDella: return "della";
  }
  return "unknown";
}

MergeMethod parse_merge_method(const std::string& name) {
  for (auto m : {MergeMethod::kLinear, MergeMethod::kMultiSlerp, MergeMethod::kTies,
                 MergeMethod::kDare, MergeMethod::kBreadcrumbs, MergeMethod::kDella}) {
    if (to_string(m) == name) return m;
  }
  throw InvalidArgument("unknown merge method '" + name + "'");
}

namespace {

const std::map<std::string, double>& defaults_for(MergeMethod method) {
  static const std::map<std::string, double> none;
  static const std::map<std::string, double> dare{{"p", 0.5}};
  static const std::map<std::string, double> ties{{"density", 0.2}};
  static const std::map<std::string, double> breadcrumbs{{"top", 0.01}, {"bottom", 0.85}};
  static const std::map<std::string, double> della{{"p_min", 0.1}, {"p_max", 0.9}};
  switch (method) {
    case MergeMethod::kDare: return dare;
    case MergeMethod::kTies: return ties;
    case MergeMethod::kBreadcrumbs: return breadcrumbs;
    case MergeMethod::kDella: return della;
    default: return none;
  }
}

}  // namespace

double MergeSpec::param(const std::string& key) const {
  if (auto it = hyperparams.find(key); it != hyperparams.end()) return it->second;
  const auto& defaults = defaults_for(method);
  if (auto it = defaults.find(key); it != defaults.end()) return it->second;
  throw InvalidArgument(to_string(method) + " has no hyperparameter '" + key + "'");
}

std::vector<std::string> MergeSpec::keys(MergeMethod method) {
  std::vector<std::string> out;
  for (const auto& kv : defaults_for(method)) out.push_back(kv.first);
  return out;
}

void MergeSpec::validate() const {
  const auto& defaults = defaults_for(method);
  for (const auto& [key, value] : hyperparams) {
    if (!defaults.count(key)) {
      throw InvalidArgument(to_string(method) + " does not accept hyperparameter '" + key + "'");
    }
    if (!std::isfinite(value)) throw InvalidArgument("hyperparameter '" + key + "' is not finite");
  }
  auto in_half_open = [&](const char* key) {
    const double v = param(key);
    if (v < 0.0 || v >= 1.0) {
      throw InvalidArgument(to_string(method) + " " + key + " must lie in [0, 1)");
    }
    return v;
  };
  switch (method) {
    case MergeMethod::kDare: in_half_open("p"); break;
    case MergeMethod::kTies: {
      const double k = param("density");
      if (k <= 0.0 || k > 1.0) throw InvalidArgument("ties density must lie in (0, 1]");
      break;
    }
    case MergeMethod::kBreadcrumbs:
      if (in_half_open("top") + in_half_open("bottom") >= 1.0) {
        throw InvalidArgument("breadcrumbs top + bottom must be below 1");
      }
      break;
    case MergeMethod::kDella:
      if (in_half_open("p_min") > in_half_open("p_max")) {
        throw InvalidArgument("della p_min must not exceed p_max");
      }
      break;
    default: break;
  }
}

// ---------------------------------------------------------------------------
// Linear merge

namespace {

void check_components(const std::vector<ParameterSet>& components, const MixtureRatio& ratio) {
  if (components.empty()) throw InvalidArgument("merge: no components");
  if (components.size() != ratio.size()) {
    throw InvalidArgument("merge: " + std::to_string(components.size()) + " components but ratio has " +
                          std::to_string(ratio.size()) + " weights");
  }
  for (std::size_t i = 1; i < components.size(); ++i) {
    require_same_schema(components[0], components[i], "merge");
  }
}

// Heaviest weight, first on ties.
std::size_t anchor_index(const MixtureRatio& ratio) {
  const auto& w = ratio.weights();
  return static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
}

template <typename Kernel>
ParameterSet merge_linear_with(const std::vector<ParameterSet>& components,
                               const MixtureRatio& ratio, Kernel kernel) {
  check_components(components, ratio);
  const std::size_t anchor = anchor_index(ratio);
  ParameterSet out;
  std::vector<std::span<const double>> inputs(components.size());
  for (const auto& [name, t] : components[0]) {
    for (std::size_t i = 0; i < components.size(); ++i) inputs[i] = components[i].at(name).values;
    std::vector<double> values(t.values.size());
    kernel(std::span<const std::span<const double>>(inputs), std::span<const double>(ratio.weights()),
           anchor, std::span<double>(values));
    out.insert(name, t.shape, std::move(values));
  }
  return out;
}

}  // namespace

ParameterSet merge_linear(const std::vector<ParameterSet>& components, const MixtureRatio& ratio) {
  return merge_linear_with(components, ratio, kernels::anchored_weighted_sum);
}

ParameterSet merge_linear_serial(const std::vector<ParameterSet>& components,
                                 const MixtureRatio& ratio) {
  return merge_linear_with(components, ratio, kernels::anchored_weighted_sum_serial);
}

// ---------------------------------------------------------------------------
// Delta-space methods

namespace {

using Vec = std::vector<double>;

// Coordinates ordered by decreasing magnitude, index breaking ties.
std::vector<std::size_t> by_magnitude_desc(const Vec& d) {
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(d[a]) > std::abs(d[b]); });
  return order;
}

Rng stream_for(std::uint64_t seed, std::size_t component, const std::string& tensor) {
  return Rng(derive_seed(derive_seed(seed, component), fnv1a64(tensor)));
}

void dare_transform(Vec& d, double p, Rng& rng) {
  const double scale = 1.0 / (1.0 - p);
  for (double& v : d) {
    const bool drop = rng.uniform() < p;
    v = drop ? 0.0 : v * scale;
  }
}

void trim_top_fraction(Vec& d, double density) {
  const auto n = d.size();
  auto keep = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-12));
  keep = std::min(keep, n);
  const auto order = by_magnitude_desc(d);
  for (std::size_t r = keep; r < n; ++r) d[order[r]] = 0.0;
}

void breadcrumbs_mask(Vec& d, double top, double bottom) {
  const auto n = d.size();
  const auto n_top = static_cast<std::size_t>(std::floor(top * static_cast<double>(n)));
  const auto n_bottom = static_cast<std::size_t>(std::floor(bottom * static_cast<double>(n)));
  const auto order = by_magnitude_desc(d);
  for (std::size_t r = 0; r < n; ++r) {
    if (r < n_top || r >= n - std::min(n, n_bottom)) d[order[r]] = 0.0;
  }
}

// Drop probability falls linearly with magnitude rank: the largest entry is
// dropped with p_min, the smallest with p_max.
void della_transform(Vec& d, double p_min, double p_max, Rng& rng) {
  const auto n = d.size();
  const auto order = by_magnitude_desc(d);
  std::vector<double> drop_p(n, p_min);
  if (n > 1) {
    for (std::size_t r = 0; r < n; ++r) {
      drop_p[order[r]] = p_min + (p_max - p_min) * static_cast<double>(r) / static_cast<double>(n - 1);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    const bool drop = rng.uniform() < drop_p[j];
    d[j] = drop ? 0.0 : d[j] / (1.0 - drop_p[j]);
  }
}

// Sign election (positive on a tie) followed by the weighted mean of the
// entries that agree with the elected sign.
Vec elect_and_merge(const std::vector<Vec>& deltas, const std::vector<double>& w) {
  const std::size_t n = deltas.empty() ? 0 : deltas[0].size();
  Vec out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double mass = 0.0;
    for (std::size_t i = 0; i < deltas.size(); ++i) mass += w[i] * deltas[i][j];
    const bool positive = mass >= 0.0;
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      const double v = deltas[i][j];
      if (v == 0.0 || w[i] == 0.0 || (v > 0.0) != positive) continue;
      num += w[i] * v;
      den += w[i];
    }
    out[j] = den > 0.0 ? num / den : 0.0;
  }
  return out;
}

Vec weighted_delta_sum(const std::vector<Vec>& deltas, const std::vector<double>& w) {
  const std::size_t n = deltas.empty() ? 0 : deltas[0].size();
  Vec zero(n, 0.0);
  Vec out(n);
  std::vector<std::span<const double>> inputs(deltas.begin(), deltas.end());
  kernels::offset_weighted_sum(zero, inputs, w, out);
  return out;
}

ParameterSet merge_multi_slerp(const std::vector<ParameterSet>& components,
                               const std::vector<double>& w, const ParameterSet& base) {
  const std::size_t n = components.size();
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (const auto& [name, t] : components[i]) {
      Vec d(t.values.size());
      kernels::subtract(t.values, base.at(name).values, d);
      ss += kernels::sum_squares(d);
    }
    norms[i] = std::sqrt(ss);
  }
  double active_weight = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (norms[i] > 0.0) active_weight += w[i];
  }
  std::vector<double> unit_w(n, 0.0);
  double target_norm = 0.0;
  if (active_weight > 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] == 0.0 || w[i] == 0.0) continue;
      const double renorm = w[i] / active_weight;
      unit_w[i] = renorm / norms[i];
      target_norm += renorm * norms[i];
    }
  }

  // Direction L = sum_i w'_i D_i / |D_i|, then rescale to the mean norm.
  std::map<std::string, Vec> direction;
  double l_ss = 0.0;
  for (const auto& [name, t] : base) {
    std::vector<Vec> deltas(n, Vec(t.values.size()));
    for (std::size_t i = 0; i < n; ++i) {
      kernels::subtract(components[i].at(name).values, t.values, deltas[i]);
    }
    Vec l = weighted_delta_sum(deltas, unit_w);
    l_ss += kernels::sum_squares(l);
    direction.emplace(name, std::move(l));
  }
  const double l_norm = std::sqrt(l_ss);
  const double scale = l_norm > 0.0 ? target_norm / l_norm : 0.0;

  ParameterSet out;
  for (const auto& [name, t] : base) {
    const Vec& l = direction.at(name);
    Vec values(t.values.size());
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = t.values[j] + scale * l[j];
    out.insert(name, t.shape, std::move(values));
  }
  return out;
}

}  // namespace

ParameterSet merge(const std::vector<ParameterSet>& components, const MixtureRatio& ratio,
                   const MergeSpec& spec, const ParameterSet* base) {
  spec.validate();
  if (spec.method == MergeMethod::kLinear) return merge_linear(components, ratio);

  check_components(components, ratio);
  if (base == nullptr) {
    throw InvalidArgument(to_string(spec.method) + " merges in delta space and needs a base model");
  }
  require_same_schema(*base, components[0], "merge");
  const auto& w = ratio.weights();
  if (spec.method == MergeMethod::kMultiSlerp) return merge_multi_slerp(components, w, *base);

  std::vector<const std::string*> names;
  for (const auto& [name, t] : *base) names.push_back(&name);
  std::vector<Vec> merged(names.size());

  // Tensors are independent and every random stream is keyed by
  // (seed, component, tensor name), so the result does not depend on the
  // schedule.
  const auto n_tensors = static_cast<std::ptrdiff_t>(names.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ti = 0; ti < n_tensors; ++ti) {
    const std::string& name = *names[static_cast<std::size_t>(ti)];
    const Vec& base_values = base->at(name).values;
    std::vector<Vec> deltas(components.size(), Vec(base_values.size()));
    for (std::size_t i = 0; i < components.size(); ++i) {
      kernels::subtract(components[i].at(name).values, base_values, deltas[i]);
    }
    Vec delta;
    switch (spec.method) {
      case MergeMethod::kDare: {
        const double p = spec.param("p");
        for (std::size_t i = 0; i < deltas.size(); ++i) {
          Rng rng = stream_for(spec.seed, i, name);
          dare_transform(deltas[i], p, rng);
        }
        delta = weighted_delta_sum(deltas, w);
        break;
      }
      case MergeMethod::kBreadcrumbs:
        for (auto& d : deltas) breadcrumbs_mask(d, spec.param("top"), spec.param("bottom"));
        delta = weighted_delta_sum(deltas, w);
        break;
      case MergeMethod::kTies:
        for (auto& d : deltas) trim_top_fraction(d, spec.param("density"));
        delta = elect_and_merge(deltas, w);
        break;
      case MergeMethod::kDella: {
        for (std::size_t i = 0; i < deltas.size(); ++i) {
          Rng rng = stream_for(spec.seed, i, name);
          della_transform(deltas[i], spec.param("p_min"), spec.param("p_max"), rng);
        }
        delta = elect_and_merge(deltas, w);
        break;
      }
      default: break;
    }
    Vec values(base_values.size());
    kernels::add(base_values, delta, values);
    merged[static_cast<std::size_t>(ti)] = std::move(values);
  }

  ParameterSet out;
  for (std::size_t ti = 0; ti < names.size(); ++ti) {
    out.insert(*names[ti], base->at(*names[ti]).shape, std::move(merged[ti]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Additivity diagnostic

AdditivityReport check_additivity(const WeightDelta& delta_i, const WeightDelta& delta_j,
                                  const WeightDelta& delta_union, const ParameterSet* base) {
  if (delta_i.base_id != delta_j.base_id || delta_i.base_id != delta_union.base_id) {
    throw SchemaError("check_additivity: deltas were computed against different bases");
  }
  require_same_schema(delta_i.entries, delta_j.entries, "check_additivity");
  require_same_schema(delta_i.entries, delta_union.entries, "check_additivity");

  AdditivityReport report;
  double err_ss = 0.0;
  double union_ss = 0.0;
  for (const auto& [name, t] : delta_union.entries) {
    const auto& a = delta_i.entries.at(name).values;
    const auto& b = delta_j.entries.at(name).values;
    Vec residual(t.values.size());
    for (std::size_t k = 0; k < residual.size(); ++k) residual[k] = t.values[k] - (a[k] + b[k]);
    const double e = kernels::sum_squares(residual);
    const double u = kernels::sum_squares(t.values);
    report.per_tensor_errors[name] = std::sqrt(e) / std::max(std::sqrt(u), kAdditivityEpsilon);
    err_ss += e;
    union_ss += u;
  }
  report.relative_error = std::sqrt(err_ss) / std::max(std::sqrt(union_ss), kAdditivityEpsilon);

  if (base != nullptr) {
    if (fingerprint(*base) != delta_union.base_id) {
      throw SchemaError("check_additivity: base does not match the deltas' base");
    }
    report.delta_magnitudes = std::array<double, 3>{
        delta_magnitude(apply_delta(*base, delta_i), *base),
        delta_magnitude(apply_delta(*base, delta_j), *base),
        delta_magnitude(apply_delta(*base, delta_union), *base)};
  }
  return report;
}

}  // namespace demix
