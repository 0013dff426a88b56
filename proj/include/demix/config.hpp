#pragma once

// Experiment configuration: a sectioned key=value file.
//
//   [run]         seed, output_root
//   [dedup]       enabled, input, mode, seed
//   [lab]         generator settings (LabConfig names), seed
//   [training]    LabTrainingConfig names (beta = general_mix_beta), seed
//   [references]  enabled, count, seed, parallel
//   [search]      plan, pool, top_k, seed, learning_rate, n_rounds,
//                 max_depth, min_samples_leaf, anchors, anchor_seed,
//                 parallel_evaluations
//   [merge]       method, seed, plus method hyperparameters
//
// Section seeds default to [run] seed. Relative paths resolve against the
// directory of the config file.

#include <cstdint>
#include <filesystem>
#include <string>

#include "demix/dedup.hpp"
#include "demix/gbdt.hpp"
#include "demix/merge.hpp"
#include "demix/search.hpp"
#include "demix/toy_lab.hpp"

namespace demix {

struct DedupStageConfig {
  bool enabled = false;
  std::filesystem::path input;
  DedupMode mode = DedupMode::kBoth;
  std::uint64_t seed = 0;
};

struct LabStageConfig {
  LabConfig lab;
  std::uint64_t seed = 0;
};

struct ReferenceStageConfig {
  bool enabled = true;
  std::size_t count = 24;
  std::uint64_t seed = 0;
  bool parallel = true;
};

struct SearchStageConfig {
  SamplePlan plan;  // plan.rng_seed is the section seed
  GbdtConfig gbdt;
  std::size_t anchors = 32;  // size of the population proxies are ranked in
  std::uint64_t anchor_seed = 0;
  bool parallel_evaluations = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_root = "runs";
  std::filesystem::path base_dir;  // directory of the config file, not part of the hash
  DedupStageConfig dedup;
  LabStageConfig lab;
  LabTrainingConfig training;
  ReferenceStageConfig references;
  SearchStageConfig search;
  MergeSpec merge;

  // Throws ConfigError naming the offending key.
  void validate() const;

  // Every resolved value, one key per line in fixed order. Two configs with
  // the same canonical text run the same experiment.
  std::string canonical() const;
  // Canonical text of one section ("lab", "training", ...).
  std::string section(const std::string& name) const;
  // SHA-256 of canonical() without output_root.
  std::string hash() const;

  // Paths as written are kept in the canonical text; this joins them to
  // base_dir for use.
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

// Throws ConfigError on syntax errors, unknown sections or keys, and bad
// values; IoError when the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});

}  // namespace demix
