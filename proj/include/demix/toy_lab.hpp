#pragma once

// Desk-scale training lab: synthetic domains, tiny models trained by
// gradient descent, and benchmark scoring on held-out sets.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "demix/merge.hpp"
#include "demix/metrics.hpp"
#include "demix/tensor_store.hpp"

namespace demix {

enum class ModelFamily { kLinearRegression, kLogistic, kMlp1Hidden };

std::string to_string(ModelFamily family);
ModelFamily parse_model_family(const std::string& name);

// n examples of dimension dim, row-major. Targets are real values, or 0/1
// labels for the logistic family.
struct Dataset {
  std::string id;
  std::string domain;
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<double> targets;
  std::uint64_t generator_seed = 0;

  std::size_t size() const { return targets.size(); }
  const double* row(std::size_t i) const { return features.data() + i * dim; }
};

enum class ScoringRule { kAccuracy, kNegLoss };

struct BenchmarkTask {
  std::string id;
  std::string domain;
  ScoringRule rule = ScoringRule::kNegLoss;
  Dataset eval;
};

// Ground truth of one domain: targets are theta . x (+ noise), x drawn with
// independent zero-mean normal coordinates of the given variances.
struct DomainSpec {
  std::string domain;
  std::vector<double> theta;
  std::vector<double> variances;
};

// Generator settings. The first shared_dims coordinates have high variance
// and a target shared by every domain; the remaining coordinates are split
// into one block per domain, with own_variance inside the domain's block and
// other_variance elsewhere.
struct LabConfig {
  std::size_t n_domains = 3;
  std::size_t dim = 16;
  std::size_t shared_dims = 4;
  std::size_t n_train = 2000;
  std::size_t n_eval = 200;
  std::size_t benchmarks_per_domain = 2;
  double noise = 0.1;
  double shared_variance = 1.0;
  double own_variance = 0.01;
  double other_variance = 0.002;
  double own_scale = 6.0;
  double other_scale = 2.0;
  double shared_jitter = 0.0;
  ModelFamily family = ModelFamily::kLinearRegression;

  void validate() const;
};

struct LabData {
  std::vector<DomainSpec> specs;
  std::vector<Dataset> candidates;  // one per domain
  Dataset general;                  // uniform blend of the domain distributions
  std::vector<BenchmarkTask> benchmarks;
};

LabData make_domains(std::size_t n_domains, std::size_t dim, std::uint64_t seed);
LabData make_domains(const LabConfig& config, std::uint64_t seed);
// Same sampling, with caller-supplied ground truth.
LabData make_domains(const std::vector<DomainSpec>& specs, const LabConfig& config, std::uint64_t seed);

// Datasets round-trip through the tensor archive ("features" [n, d],
// "targets" [n], identity in metadata).
ParameterSet dataset_to_params(const Dataset& dataset, const std::string& kind);
Dataset dataset_from_params(const ParameterSet& params);
void save_lab(const LabData& lab, const std::filesystem::path& dir);
LabData load_lab(const std::filesystem::path& dir);

// Zeros for linear/logistic; small seeded normals for the MLP.
ParameterSet init_model(ModelFamily family, std::size_t dim, std::size_t hidden, std::uint64_t seed);
ModelFamily infer_family(const ParameterSet& model);

struct TrainConfig {
  ModelFamily family = ModelFamily::kLinearRegression;
  std::size_t steps = 1000;
  double step_size = 0.01;
  std::size_t batch_size = 64;  // 0 = full batch
  std::uint64_t seed = 0;

  void validate() const;
};

using DatasetMixture = std::vector<std::pair<const Dataset*, double>>;

// Gradient descent on the weighted mixture. Mini-batches are split across
// datasets in proportion to the weights (largest remainders, with the
// fractional parts carried to the next step) and filled by uniform draws.
// Full batch minimizes the weighted mean of the per-dataset mean losses.
// losses, when given, receives the batch loss before every step and the
// final loss (full batch: exact mixture loss).
// Throws TrainingError with the step index when the loss stops being finite.
ParameterSet train(const DatasetMixture& mixture, const ParameterSet& init, const TrainConfig& config,
                   std::vector<double>* losses = nullptr);

// Mixture loss of a model, as minimized by full-batch training.
double mixture_loss(const DatasetMixture& mixture, const ParameterSet& model);

// Smoothness constant of the mixture loss: 2 * lambda_max of the second
// moment (with the bias feature) for squared loss, a quarter of that for the
// logistic loss. The MLP uses the squared-loss value as a heuristic.
double lipschitz_constant(const DatasetMixture& mixture, ModelFamily family);

// Benchmark id -> score in [0, 100]. Regression tasks score
// 100 / (1 + mse / var(y)), classification tasks 100 * accuracy.
std::map<std::string, double> evaluate_model(const ParameterSet& model,
                                             const std::vector<BenchmarkTask>& tasks);

struct LabTrainingConfig {
  ModelFamily family = ModelFamily::kLinearRegression;
  std::size_t hidden = 16;
  double general_mix_beta = 0.5;
  std::size_t base_steps = 300;
  double base_step_scale = 1.0;  // step size = scale / L
  std::size_t base_batch_size = 0;
  std::size_t steps = 1000;
  double step_scale = 0.2;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PreparedComponents {
  ParameterSet base;
  std::vector<ParameterSet> components;
  std::vector<WeightDelta> deltas;
  double step_size = 0.0;  // resolved component step size
};

// L over the general data and every candidate, the constant the relative step
// scales refer to.
double lab_lipschitz(const LabData& lab, ModelFamily family);

ParameterSet train_base(const LabData& lab, const LabTrainingConfig& config);

// Stage 1 trains the base on general data; stage 2 trains one component per
// candidate on beta general + (1 - beta) candidate, all with the same seed.
PreparedComponents prepare_components(const LabData& lab, const LabTrainingConfig& config);
PreparedComponents prepare_components(const LabData& lab, const ParameterSet& base,
                                      const LabTrainingConfig& config);

// Trains one model on beta general + (1 - beta) * sum_i alpha_i candidate_i
// from the base.
ParameterSet train_reference(const LabData& lab, const ParameterSet& base, const MixtureRatio& ratio,
                             const LabTrainingConfig& config);

// One row per ratio, keyed by ref000, ref001, ... . Trainings run
// concurrently when parallel is set; the result does not depend on it.
// Training failures are rethrown with the ratio in the message.
ScoreTable build_reference_set(const LabData& lab, const ParameterSet& base,
                               const std::vector<MixtureRatio>& ratios,
                               const LabTrainingConfig& config, bool parallel = true,
                               std::vector<ParameterSet>* models = nullptr);

// Linear-merge proxies of the components, scored like the references.
ScoreTable build_proxy_set(const LabData& lab, const PreparedComponents& prepared,
                           const std::vector<MixtureRatio>& ratios);

// benchmark id -> domain for the lab's benchmarks.
std::map<std::string, std::string> benchmark_domains(const LabData& lab);

}  // namespace demix
