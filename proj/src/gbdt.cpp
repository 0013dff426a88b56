#include "demix/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "demix/errors.hpp"

namespace demix {

void GbdtConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("gbdt: learning rate must be positive");
  }
  if (n_rounds < 0) throw InvalidArgument("gbdt: n_rounds must be nonnegative");
  if (tree.max_depth < 0) throw InvalidArgument("gbdt: max_depth must be nonnegative");
  if (tree.min_samples_leaf < 1) throw InvalidArgument("gbdt: min_samples_leaf must be positive");
}

double RegressionTree::predict(std::span<const double> x) const {
  int node = 0;
  while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const auto& n = nodes[static_cast<std::size_t>(node)];
    node = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(node)].value;
}

std::size_t RegressionTree::leaf_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.feature < 0; }));
}

RankPredictor::RankPredictor(std::size_t n_features, double base_prediction, double learning_rate,
                             std::vector<RegressionTree> trees)
    : n_features_(n_features),
      base_prediction_(base_prediction),
      learning_rate_(learning_rate),
      trees_(std::move(trees)) {}

double RankPredictor::predict_unchecked(const double* x) const {
  const std::span<const double> row(x, n_features_);
  double sum = 0.0;
  for (const auto& tree : trees_) sum += tree.predict(row);
  return base_prediction_ + learning_rate_ * sum;
}

double RankPredictor::predict(std::span<const double> x) const {
  if (x.size() != n_features_) {
    throw InvalidArgument("predict: dimension mismatch (" + std::to_string(x.size()) + " vs " +
                          std::to_string(n_features_) + ")");
  }
  return predict_unchecked(x.data());
}

std::vector<double> RankPredictor::predict_batch(std::span<const double> rows) const {
  if (n_features_ == 0 || rows.size() % n_features_ != 0) {
    throw InvalidArgument("predict_batch: row data is not a multiple of the dimension");
  }
  const auto n = static_cast<std::ptrdiff_t>(rows.size() / n_features_);
  std::vector<double> out(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static) if (n > 256)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = predict_unchecked(rows.data() + i * static_cast<std::ptrdiff_t>(n_features_));
  }
  return out;
}

std::vector<double> RankPredictor::predict_batch_serial(std::span<const double> rows) const {
  if (n_features_ == 0 || rows.size() % n_features_ != 0) {
    throw InvalidArgument("predict_batch: row data is not a multiple of the dimension");
  }
  std::vector<double> out(rows.size() / n_features_);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sum = 0.0;
    for (const auto& tree : trees_) sum += tree.predict(rows.subspan(i * n_features_, n_features_));
    out[i] = base_prediction_ + learning_rate_ * sum;
  }
  return out;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(std::span<const double> features, std::size_t n_features,
              std::span<const double> residuals, const TreeConfig& config)
      : x_(features), d_(n_features), r_(residuals), config_(config) {}

  RegressionTree build() {
    std::vector<std::size_t> all(r_.size());
    std::iota(all.begin(), all.end(), 0);
    double total_ss = 0.0;
    for (double v : r_) total_ss += v * v;
    // Splits whose gain is pure rounding noise are ignored.
    min_gain_ = 1e-12 * total_ss;
    grow(all, 0);
    return std::move(tree_);
  }

 private:
  double at(std::size_t row, std::size_t f) const { return x_[row * d_ + f]; }

  int grow(std::vector<std::size_t>& idx, int depth) {
    const int node_id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    double sum = 0.0;
    for (std::size_t i : idx) sum += r_[i];
    const double n = static_cast<double>(idx.size());

    const std::size_t min_leaf = config_.min_samples_leaf;
    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = min_gain_;
    if (depth < config_.max_depth && idx.size() >= 2 * min_leaf) {
      std::vector<std::size_t> order = idx;
      for (std::size_t f = 0; f < d_; ++f) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return at(a, f) < at(b, f); });
        double left_sum = 0.0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
          left_sum += r_[order[k]];
          const std::size_t n_left = k + 1;
          const std::size_t n_right = order.size() - n_left;
          if (n_left < min_leaf || n_right < min_leaf) continue;
          const double lo = at(order[k], f);
          const double hi = at(order[k + 1], f);
          if (!(lo < hi)) continue;
          const double right_sum = sum - left_sum;
          const double gain = left_sum * left_sum / static_cast<double>(n_left) +
                              right_sum * right_sum / static_cast<double>(n_right) - sum * sum / n;
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            best_threshold = lo + 0.5 * (hi - lo);
            if (!(best_threshold < hi)) best_threshold = lo;
          }
        }
      }
    }

    if (best_feature < 0) {
      tree_.nodes[static_cast<std::size_t>(node_id)].value = sum / n;
      return node_id;
    }
    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) {
      (at(i, static_cast<std::size_t>(best_feature)) <= best_threshold ? left : right).push_back(i);
    }
    const int l = grow(left, depth + 1);
    const int r = grow(right, depth + 1);
    auto& node = tree_.nodes[static_cast<std::size_t>(node_id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return node_id;
  }

  std::span<const double> x_;
  std::size_t d_;
  std::span<const double> r_;
  TreeConfig config_;
  double min_gain_ = 0.0;
  RegressionTree tree_;
};

}  // namespace

RankPredictor fit_gbdt(std::span<const double> features, std::size_t n_features,
                       std::span<const double> targets, const GbdtConfig& config) {
  config.validate();
  if (n_features == 0) throw InvalidArgument("gbdt: zero features");
  if (targets.size() < 2) throw InvalidArgument("gbdt: need at least 2 observations");
  if (features.size() != targets.size() * n_features) {
    throw InvalidArgument("gbdt: feature matrix does not match the number of targets");
  }
  for (double t : targets) {
    if (!std::isfinite(t)) throw InvalidArgument("gbdt: non-finite target");
  }
  for (double v : features) {
    if (!std::isfinite(v)) throw InvalidArgument("gbdt: non-finite feature");
  }

  const auto n = targets.size();
  double base = 0.0;
  for (double t : targets) base += t;
  base /= static_cast<double>(n);
  // One correction step makes the mean of identical targets exact.
  double correction = 0.0;
  for (double t : targets) correction += t - base;
  base += correction / static_cast<double>(n);

  std::vector<double> fitted(n, base);
  std::vector<double> residual(n);
  std::vector<RegressionTree> trees;
  trees.reserve(static_cast<std::size_t>(config.n_rounds));
  for (int round = 0; round < config.n_rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) residual[i] = targets[i] - fitted[i];
    RegressionTree tree = TreeBuilder(features, n_features, residual, config.tree).build();
    for (std::size_t i = 0; i < n; ++i) {
      fitted[i] += config.learning_rate * tree.predict(features.subspan(i * n_features, n_features));
    }
    trees.push_back(std::move(tree));
  }
  return RankPredictor(n_features, base, config.learning_rate, std::move(trees));
}

}  // namespace demix
