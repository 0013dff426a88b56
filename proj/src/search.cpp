#include "demix/search.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include <json.hpp>

#include "demix/errors.hpp"

namespace demix {

void SamplePlan::validate() const {
  if (per_iteration_counts.empty()) throw InvalidArgument("sample plan: no iterations");
  for (std::size_t c : per_iteration_counts) {
    if (c == 0) throw InvalidArgument("sample plan: iteration counts must be positive");
  }
  if (per_iteration_counts[0] < 2) {
    throw InvalidArgument("sample plan: the first iteration needs at least 2 evaluations to fit on");
  }
  if (final_candidate_pool == 0) throw InvalidArgument("sample plan: pool must be positive");
  if (top_k_average == 0) throw InvalidArgument("sample plan: top_k must be positive");
  if (top_k_average > final_candidate_pool) {
    throw InvalidArgument("sample plan: top_k " + std::to_string(top_k_average) + " exceeds pool " +
                          std::to_string(final_candidate_pool));
  }
  for (std::size_t t = 1; t < per_iteration_counts.size(); ++t) {
    if (per_iteration_counts[t] > final_candidate_pool) {
      throw InvalidArgument("sample plan: iteration " + std::to_string(t + 1) +
                            " selects more ratios than the pool holds");
    }
  }
}

std::size_t SamplePlan::total_evaluations() const {
  return std::accumulate(per_iteration_counts.begin(), per_iteration_counts.end(), std::size_t{0});
}

std::vector<MixtureRatio> sample_simplex(std::size_t n_dims, std::size_t count, Rng& rng,
                                         const std::vector<std::string>& ids) {
  if (n_dims == 0) throw InvalidArgument("sample_simplex: n_dims must be at least 1");
  std::vector<MixtureRatio> out;
  out.reserve(count);
  std::vector<double> w(n_dims);
  for (std::size_t s = 0; s < count; ++s) {
    double sum = 0.0;
    for (auto& v : w) {
      v = rng.exponential();
      sum += v;
    }
    for (auto& v : w) v /= sum;
    out.emplace_back(w, ids);
  }
  return out;
}

std::vector<MixtureRatio> sample_simplex(std::size_t n_dims, std::size_t count, std::uint64_t seed,
                                         const std::vector<std::string>& ids) {
  Rng rng(seed);
  return sample_simplex(n_dims, count, rng, ids);
}

namespace {

std::vector<double> flatten(const std::vector<MixtureRatio>& ratios) {
  std::vector<double> rows;
  if (!ratios.empty()) rows.reserve(ratios.size() * ratios.front().size());
  for (const auto& r : ratios) rows.insert(rows.end(), r.weights().begin(), r.weights().end());
  return rows;
}

}  // namespace

RankPredictor fit_predictor(const std::vector<MixtureRatio>& ratios,
                            const std::vector<double>& scores, const GbdtConfig& config) {
  if (ratios.size() != scores.size()) throw InvalidArgument("fit_predictor: ratio/score count mismatch");
  if (ratios.empty()) throw InvalidArgument("fit_predictor: need at least 2 observations");
  const std::size_t d = ratios.front().size();
  for (const auto& r : ratios) {
    if (r.size() != d) throw InvalidArgument("fit_predictor: ratios differ in dimension");
  }
  return fit_gbdt(flatten(ratios), d, scores, config);
}

double predict(const RankPredictor& predictor, const MixtureRatio& ratio) {
  return predictor.predict(ratio.weights());
}

namespace {

ProxyEvaluation evaluate_one(const Evaluator& evaluator, const MixtureRatio& ratio) {
  ProxyEvaluation result;
  try {
    result = evaluator(ratio);
  } catch (const std::exception& e) {
    throw EvaluationError("evaluator failed at ratio " + ratio.to_string() + ": " + e.what(),
                          ratio.weights());
  }
  if (!std::isfinite(result.ranking_score)) {
    throw EvaluationError("evaluator returned a non-finite ranking score at ratio " + ratio.to_string(),
                          ratio.weights());
  }
  result.ratio = ratio;
  return result;
}

std::vector<ProxyEvaluation> evaluate_all(const Evaluator& evaluator,
                                          const std::vector<MixtureRatio>& ratios, bool parallel) {
  std::vector<ProxyEvaluation> results(ratios.size());
  if (!parallel) {
    for (std::size_t i = 0; i < ratios.size(); ++i) results[i] = evaluate_one(evaluator, ratios[i]);
    return results;
  }
  std::vector<std::exception_ptr> errors(ratios.size());
  const auto n = static_cast<std::ptrdiff_t>(ratios.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      results[k] = evaluate_one(evaluator, ratios[k]);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  // Report the failure a sequential run would have hit first.
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

double median(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

// Indices of the k lowest predictions, ties in sample order.
std::vector<std::size_t> best_indices(const std::vector<double>& predicted, std::size_t k) {
  std::vector<std::size_t> idx(predicted.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (predicted[a] != predicted[b]) return predicted[a] < predicted[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

struct PoolScoring {
  std::vector<MixtureRatio> pool;
  std::vector<double> predicted;
  std::vector<std::size_t> best;
};

PoolScoring score_pool(const RankPredictor& predictor, std::size_t n_dims, std::size_t pool_size,
                       std::size_t keep, Rng& rng, const std::vector<std::string>& ids,
                       FitRecord& record) {
  PoolScoring s;
  s.pool = sample_simplex(n_dims, pool_size, rng, ids);
  s.predicted = predictor.predict_batch(flatten(s.pool));
  s.best = best_indices(s.predicted, keep);
  record.pool_size = pool_size;
  record.pool_median_prediction = median(s.predicted);
  record.selected = keep;
  return s;
}

RankPredictor fit_on(const std::vector<TranscriptEntry>& entries, const GbdtConfig& config,
                     std::size_t before_iteration, FitRecord& record) {
  std::vector<MixtureRatio> ratios;
  std::vector<double> scores;
  for (const auto& e : entries) {
    ratios.push_back(e.evaluation.ratio);
    scores.push_back(e.evaluation.ranking_score);
  }
  RankPredictor predictor = fit_predictor(ratios, scores, config);
  const auto fitted = predictor.predict_batch(flatten(ratios));
  double se = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) se += (fitted[i] - scores[i]) * (fitted[i] - scores[i]);
  record.before_iteration = before_iteration;
  record.n_observations = scores.size();
  record.train_rmse = std::sqrt(se / static_cast<double>(scores.size()));
  return predictor;
}

}  // namespace

SearchResult run_search(const Evaluator& evaluator, const SamplePlan& plan,
                        const GbdtConfig& predictor_config,
                        const std::vector<std::string>& candidate_ids, const SearchOptions& options) {
  plan.validate();
  predictor_config.validate();
  const std::size_t d = candidate_ids.size();
  if (d == 0) throw InvalidArgument("run_search: no candidate datasets");
  if (!evaluator) throw InvalidArgument("run_search: no evaluator");

  Rng rng(plan.rng_seed);
  SearchResult result;
  auto& transcript = result.transcript;

  auto record_batch = [&](std::size_t iteration, const std::vector<MixtureRatio>& ratios,
                          const std::vector<double>* predicted) {
    auto evals = evaluate_all(evaluator, ratios, options.parallel_evaluations);
    for (std::size_t i = 0; i < evals.size(); ++i) {
      TranscriptEntry entry;
      entry.iteration = iteration;
      entry.index = i;
      entry.evaluation = std::move(evals[i]);
      if (predicted) entry.predicted_score = (*predicted)[i];
      transcript.entries.push_back(std::move(entry));
    }
  };

  record_batch(0, sample_simplex(d, plan.per_iteration_counts[0], rng, candidate_ids), nullptr);

  for (std::size_t t = 1; t < plan.per_iteration_counts.size(); ++t) {
    FitRecord record;
    const RankPredictor predictor = fit_on(transcript.entries, predictor_config, t, record);
    auto scored = score_pool(predictor, d, plan.final_candidate_pool, plan.per_iteration_counts[t], rng,
                             candidate_ids, record);
    transcript.fits.push_back(record);
    std::vector<MixtureRatio> chosen;
    std::vector<double> chosen_pred;
    for (std::size_t i : scored.best) {
      chosen.push_back(scored.pool[i]);
      chosen_pred.push_back(scored.predicted[i]);
    }
    record_batch(t, chosen, &chosen_pred);
  }

  FitRecord final_record;
  const RankPredictor predictor =
      fit_on(transcript.entries, predictor_config, plan.per_iteration_counts.size(), final_record);
  auto scored = score_pool(predictor, d, plan.final_candidate_pool, plan.top_k_average, rng,
                           candidate_ids, final_record);
  transcript.fits.push_back(final_record);

  std::vector<double> mean(d, 0.0);
  for (std::size_t i : scored.best) {
    const auto& w = scored.pool[i].weights();
    for (std::size_t k = 0; k < d; ++k) mean[k] += w[k];
    transcript.final_top_predictions.push_back(scored.predicted[i]);
  }
  double sum = 0.0;
  for (double v : mean) sum += v;
  for (double& v : mean) v /= sum;
  result.mixture = MixtureRatio(mean, candidate_ids);
  result.predicted_score = predict(predictor, result.mixture);
  return result;
}

std::string transcript_jsonl(const SearchTranscript& transcript,
                             const std::vector<std::string>& candidate_ids) {
  std::string out;
  for (const auto& e : transcript.entries) {
    nlohmann::ordered_json j;
    j["iteration"] = e.iteration;
    j["index"] = e.index;
    j["candidates"] = candidate_ids;
    j["ratio"] = e.evaluation.ratio.weights();
    j["scores"] = e.evaluation.per_benchmark_scores;
    j["ranking_score"] = e.evaluation.ranking_score;
    if (e.predicted_score) {
      j["predicted_score"] = *e.predicted_score;
    } else {
      j["predicted_score"] = nullptr;
    }
    out += j.dump();
    out += '\n';
  }
  for (const auto& f : transcript.fits) {
    nlohmann::ordered_json j;
    j["fit"] = true;
    j["before_iteration"] = f.before_iteration;
    j["n_observations"] = f.n_observations;
    j["train_rmse"] = f.train_rmse;
    j["pool_size"] = f.pool_size;
    j["pool_median_prediction"] = f.pool_median_prediction;
    j["selected"] = f.selected;
    out += j.dump();
    out += '\n';
  }
  nlohmann::ordered_json tail;
  tail["final_selection"] = transcript.final_selection;
  tail["final_top_predictions"] = transcript.final_top_predictions;
  out += tail.dump();
  out += '\n';
  return out;
}

}  // namespace demix
