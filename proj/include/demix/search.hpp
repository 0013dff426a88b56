#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "demix/gbdt.hpp"
#include "demix/merge.hpp"
#include "demix/random.hpp"

namespace demix {

struct SamplePlan {
  std::vector<std::size_t> per_iteration_counts{64, 32, 16};
  std::size_t final_candidate_pool = 100000;
  std::size_t top_k_average = 128;
  std::uint64_t rng_seed = 0;

  // Counts positive (the first at least 2), top_k_average <= pool, and every later-iteration count
  // <= pool. Throws InvalidArgument.
  void validate() const;
  std::size_t total_evaluations() const;
};

// Uniform samples from the simplex: Dirichlet(1, ..., 1) drawn as normalized
// exponentials.
std::vector<MixtureRatio> sample_simplex(std::size_t n_dims, std::size_t count, std::uint64_t seed,
                                         const std::vector<std::string>& ids = {});
std::vector<MixtureRatio> sample_simplex(std::size_t n_dims, std::size_t count, Rng& rng,
                                         const std::vector<std::string>& ids = {});

// Fits the ranking predictor on (ratio, ranking score) pairs.
RankPredictor fit_predictor(const std::vector<MixtureRatio>& ratios,
                            const std::vector<double>& scores, const GbdtConfig& config);
double predict(const RankPredictor& predictor, const MixtureRatio& ratio);

struct ProxyEvaluation {
  MixtureRatio ratio;
  std::map<std::string, double> per_benchmark_scores;
  double ranking_score = 0.0;  // lower is better
};

using Evaluator = std::function<ProxyEvaluation(const MixtureRatio&)>;

struct TranscriptEntry {
  std::size_t iteration = 0;  // 0-based
  std::size_t index = 0;      // position within the iteration
  ProxyEvaluation evaluation;
  std::optional<double> predicted_score;  // absent in the first iteration
};

struct FitRecord {
  std::size_t before_iteration = 0;  // == iteration count for the final fit
  std::size_t n_observations = 0;
  double train_rmse = 0.0;
  std::size_t pool_size = 0;
  double pool_median_prediction = 0.0;
  std::size_t selected = 0;
};

struct SearchTranscript {
  std::vector<TranscriptEntry> entries;
  std::vector<FitRecord> fits;
  std::string final_selection = "final_pool_only";
  std::vector<double> final_top_predictions;  // best first
};

struct SearchOptions {
  // Evaluate the ratios of one iteration concurrently. The transcript is the
  // same as for sequential evaluation.
  bool parallel_evaluations = false;
};

struct SearchResult {
  MixtureRatio mixture;
  SearchTranscript transcript;
  double predicted_score = 0.0;  // final predictor at `mixture`
};

// Iterative search: evaluate uniform samples, then repeatedly fit the
// predictor on everything seen so far, score a fresh pool and evaluate the
// best-predicted ratios. The result is the renormalized mean of the
// top_k_average best-predicted ratios of a final fresh pool. Evaluator
// failures are rethrown as EvaluationError carrying the ratio.
SearchResult run_search(const Evaluator& evaluator, const SamplePlan& plan,
                        const GbdtConfig& predictor_config,
                        const std::vector<std::string>& candidate_ids,
                        const SearchOptions& options = {});

// One JSON object per line: iteration, index, ratio, scores, ranking_score,
// predicted_score; fit records follow with "fit" set.
std::string transcript_jsonl(const SearchTranscript& transcript,
                             const std::vector<std::string>& candidate_ids);

}  // namespace demix
