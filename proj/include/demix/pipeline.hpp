#pragma once

// End-to-end experiment runner. Stages run in order, each one writing its
// artifacts under the run directory <output_root>/<config hash prefix>:
//
//   dedup        dedup/report.json, dedup/kept.jsonl        (when enabled)
//   lab          lab/...                                    datasets and benchmarks
//   components   components/base.dmxt, components/<id>.dmxt, components/info.json
//   references   references/ratios.json, scores.csv, domains.csv   (when enabled)
//   search       search/anchors.json, anchor_scores.csv, transcript.jsonl, result.json
//   consistency  consistency/proxy_scores.csv, report.json  (with references)
//   report       report.json, report.txt
//
// A stage is skipped when its recorded input hash matches (config section
// plus upstream output hashes) and its artifacts still hash to the recorded
// output hash. Otherwise its outputs are copied from the shared cache under
// <output_root>/.cache when another run already computed the same input
// hash, and computed from scratch as a last resort.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "demix/config.hpp"
#include "demix/metrics.hpp"
#include "demix/search.hpp"
#include "demix/toy_lab.hpp"

namespace demix {

enum class StageStatus { kPending, kDone, kFailed };

std::string to_string(StageStatus status);
StageStatus parse_stage_status(const std::string& name);

struct StageRecord {
  std::string name;
  StageStatus status = StageStatus::kPending;
  std::string input_hash;
  std::string output_hash;  // set when done
  std::string message;      // set when failed
  std::vector<std::string> artifacts;  // files relative to the run directory
};

struct ExperimentManifest {
  std::string config_hash;
  std::string config;  // canonical text
  std::uint64_t seed = 0;
  std::map<std::string, std::string> artifacts;  // name -> path relative to the run directory
  std::vector<StageRecord> stages;               // execution order
  std::string created_at;
  std::string updated_at;

  const StageRecord* stage(const std::string& name) const;
  StageRecord* stage(const std::string& name);
};

std::string manifest_json(const ExperimentManifest& manifest);
ExperimentManifest parse_manifest_json(const std::string& text);  // FormatError
ExperimentManifest load_manifest(const std::filesystem::path& path);

struct PipelineOptions {
  std::ostream* log = nullptr;  // one line per stage
  // Reuse stage outputs across run directories under the same output root.
  bool shared_cache = true;
};

struct PipelineRun {
  std::filesystem::path run_dir;
  ExperimentManifest manifest;
  std::vector<std::string> executed;
  std::vector<std::string> cached;    // up to date in the run directory
  std::vector<std::string> restored;  // copied from the shared cache
};

// Takes the run directory lock for the whole run; a second process on the
// same directory gets PipelineError. A failing stage is recorded as failed in
// the manifest and its exception propagates.
PipelineRun run_pipeline(const ExperimentConfig& config, const PipelineOptions& options = {});
PipelineRun run_pipeline(const std::filesystem::path& config_path, const PipelineOptions& options = {});

std::filesystem::path run_directory(const ExperimentConfig& config);

// Holds <dir>/manifest.lock while alive.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// Merge-then-evaluate proxy scoring: the candidate ratio's merged model is
// scored on the benchmarks and ranked against a fixed population. Never
// trains.
class ProxyEvaluator {
 public:
  ProxyEvaluator(const LabData& lab, const PreparedComponents& components, MergeSpec spec,
                 ScoreTable population);

  ProxyEvaluation operator()(const MixtureRatio& ratio) const;
  std::map<std::string, double> scores(const MixtureRatio& ratio) const;

  const ScoreTable& population() const { return population_; }

 private:
  const LabData* lab_;
  const PreparedComponents* components_;
  MergeSpec spec_;
  ScoreTable population_;
};

// Merged-proxy scores for each ratio, rows named by `prefix` + index.
ScoreTable proxy_table(const LabData& lab, const PreparedComponents& components,
                       const MergeSpec& spec, const std::vector<MixtureRatio>& ratios,
                       const std::string& prefix);

// Stage building blocks, shared with the CLI subcommands.
void save_components(const PreparedComponents& prepared, const LabData& lab,
                     const std::filesystem::path& dir);
PreparedComponents load_components(const std::filesystem::path& dir);

std::vector<MixtureRatio> reference_ratios(const ReferenceStageConfig& config,
                                           const std::vector<std::string>& candidate_ids);
void save_ratios(const std::vector<MixtureRatio>& ratios, const std::filesystem::path& path);
std::vector<MixtureRatio> load_ratios(const std::filesystem::path& path);

std::string correlation_json(const CorrelationReport& report);

// Runs the mixture search with the merge-based evaluator and writes
// anchors.json, anchor_scores.csv, transcript.jsonl and result.json into
// out_dir.
SearchResult search_mixture(const LabData& lab, const PreparedComponents& components,
                            const SearchStageConfig& config, const MergeSpec& merge,
                            const std::filesystem::path& out_dir);

struct BudgetSummary {
  std::vector<std::size_t> plan;
  std::size_t planned = 0;
  std::size_t used = 0;
  std::size_t final_pool = 0;
  std::size_t top_k = 0;

  bool operator==(const BudgetSummary&) const = default;
};

struct ReportSummary {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> candidates;
  std::vector<double> mixture;
  double predicted_ranking_score = 0.0;
  // Merged proxy at the chosen mixture.
  std::map<std::string, double> domain_scores;
  double macro_score = 0.0;
  std::map<std::string, double> domain_ranks;
  double macro_rank = 0.0;
  std::size_t population_size = 0;
  BudgetSummary budget;
  std::optional<CorrelationReport> consistency;
  std::size_t reference_count = 0;

  bool operator==(const ReportSummary& other) const;
};

// Needs a done search stage; reads the run's artifacts. Throws PipelineError
// for an incomplete manifest.
ReportSummary report(const ExperimentManifest& manifest, const std::filesystem::path& run_dir);
ReportSummary report(const std::filesystem::path& manifest_path);

std::string report_json(const ReportSummary& summary);
ReportSummary parse_report_json(const std::string& text);  // FormatError
std::string report_text(const ReportSummary& summary);

}  // namespace demix
