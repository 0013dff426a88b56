#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace demix {

struct TreeConfig {
  int max_depth = 3;
  std::size_t min_samples_leaf = 2;
};

// Gradient boosting with squared-error loss.
struct GbdtConfig {
  double learning_rate = 0.02;
  int n_rounds = 300;
  TreeConfig tree;

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;   // taken when x[feature] <= threshold
  int right = -1;
  double value = 0.0;  // leaf output
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(std::span<const double> x) const;
  std::size_t leaf_count() const;
};

// prediction(x) = base_prediction + learning_rate * sum_t tree_t(x)
class RankPredictor {
 public:
  RankPredictor() = default;
  RankPredictor(std::size_t n_features, double base_prediction, double learning_rate,
                std::vector<RegressionTree> trees);

  // Throws InvalidArgument when x.size() differs from the training dimension.
  double predict(std::span<const double> x) const;

  // Row-major batch of rows.size() / n_features points. The OpenMP version
  // sums trees in the same order per point, so both produce identical bits.
  std::vector<double> predict_batch(std::span<const double> rows) const;
  std::vector<double> predict_batch_serial(std::span<const double> rows) const;

  std::size_t n_features() const { return n_features_; }
  double base_prediction() const { return base_prediction_; }
  double learning_rate() const { return learning_rate_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }

 private:
  double predict_unchecked(const double* x) const;

  std::size_t n_features_ = 0;
  double base_prediction_ = 0.0;
  double learning_rate_ = 0.0;
  std::vector<RegressionTree> trees_;
};

// Fits on row-major features (targets.size() rows). Needs at least two rows
// and finite targets. Splits are exact greedy over midpoints between distinct
// feature values; equal gains keep the lower feature, then the lower
// threshold.
RankPredictor fit_gbdt(std::span<const double> features, std::size_t n_features,
                       std::span<const double> targets, const GbdtConfig& config);

}  // namespace demix
