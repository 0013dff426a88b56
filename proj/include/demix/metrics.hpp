#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace demix {

// Fractional (mid) ranks, 1-based, ascending: the smallest value gets rank 1
// and tied values share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of the mid-ranks. Throws InvalidArgument for fewer than
// two points or mismatched lengths and DegenerateError("degenerate ranking")
// when either side has no rank variance.
double spearman_rho(std::span<const double> xs, std::span<const double> ys);

using ModelScores = std::map<std::string, double>;

// Spearman rho restricted to the ceil(n/4) models with the highest reference
// score (ties broken by model id). Needs at least 8 models.
double top_quartile_rho(const ModelScores& reference_scores, const ModelScores& proxy_scores);

// proxy_avg / reference_avg; reference_avg must be positive.
double capability_recovery(double proxy_avg, double reference_avg);

// model -> benchmark -> score, plus the benchmark -> domain mapping.
struct ScoreTable {
  std::map<std::string, std::map<std::string, double>> rows;
  std::map<std::string, std::string> domain_of;

  // Rectangular, finite, every benchmark mapped to a domain. Throws
  // InvalidArgument otherwise.
  void validate() const;

  std::vector<std::string> models() const;
  std::vector<std::string> benchmarks() const;
  std::vector<std::string> domains() const;

  // Mean of the model's scores on the domain's benchmarks.
  double domain_average(const std::string& model, const std::string& domain) const;
  // Mean over every benchmark.
  double average(const std::string& model) const;
  // model -> domain_average for one domain.
  ModelScores domain_scores(const std::string& domain) const;
};

// CSV columns: model_id,benchmark_id,score (header row required).
ScoreTable load_score_csv(const std::filesystem::path& scores,
                          const std::filesystem::path& domains);
void save_score_csv(const ScoreTable& table, const std::filesystem::path& scores);
// CSV columns: benchmark_id,domain_id
void save_domain_csv(const ScoreTable& table, const std::filesystem::path& domains);
std::string score_csv_text(const ScoreTable& table);

struct RankResult {
  std::map<std::string, double> per_domain;  // 1 = best, ties averaged
  double macro = 0.0;                        // unweighted mean over domains
};

// Per domain: average the model's scores within the domain, rank all models
// by that average (highest score = rank 1), then average the ranks.
RankResult macro_average_rank(const ScoreTable& table, const std::string& target);

// Ranks a model that is not part of `population` by inserting it, so ranks
// fall in [1, population size + 1]. `scores` maps benchmark -> score.
RankResult rank_against(const ScoreTable& population, const std::map<std::string, double>& scores);

struct CorrelationReport {
  std::map<std::string, double> per_domain_rho;
  double macro_avg_rho = 0.0;
  // Missing when the top quartile of a domain has tied references or proxies.
  std::map<std::string, std::optional<double>> top_quartile_rho;
  std::optional<double> top_quartile_macro;
  // Mean over models of proxy average / reference average.
  double capability_recovery = 0.0;
};

// Correlates per-model domain averages between the two tables. Both must hold
// the same models and benchmarks.
CorrelationReport consistency_report(const ScoreTable& reference, const ScoreTable& proxy);

}  // namespace demix
