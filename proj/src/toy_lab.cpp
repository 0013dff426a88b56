#include "demix/toy_lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>

#include <json.hpp>

#include "demix/errors.hpp"
#include "demix/kernels.hpp"
#include "demix/random.hpp"

namespace demix {

std::string to_string(ModelFamily family) {
  switch (family) {
    case ModelFamily::kLinearRegression: return "linear_regression";
    case ModelFamily::kLogistic: return "logistic";
    case ModelFamily::kMlp1Hidden: return "mlp_1hidden";
  }
  return "unknown";
}

ModelFamily parse_model_family(const std::string& name) {
  for (auto f : {ModelFamily::kLinearRegression, ModelFamily::kLogistic, ModelFamily::kMlp1Hidden}) {
    if (to_string(f) == name) return f;
  }
  throw InvalidArgument("unknown model family '" + name + "'");
}

void LabConfig::validate() const {
  if (n_domains < 2) throw InvalidArgument("lab: need at least 2 domains");
  if (dim < 2) throw InvalidArgument("lab: dimension must be at least 2");
  if (shared_dims >= dim || dim - shared_dims < n_domains) {
    throw InvalidArgument("lab: need at least one non-shared coordinate per domain");
  }
  if (n_train < n_domains) throw InvalidArgument("lab: n_train must be at least the domain count");
  if (n_eval < 2) throw InvalidArgument("lab: n_eval must be at least 2");
  if (benchmarks_per_domain == 0) throw InvalidArgument("lab: benchmarks_per_domain must be positive");
  for (double v : {noise, shared_jitter, own_scale, other_scale}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("lab: scales must be finite and nonnegative");
  }
  for (double v : {shared_variance, own_variance, other_variance}) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("lab: variances must be positive");
  }
}

namespace {

std::uint64_t stream(std::uint64_t seed, const std::string& label) {
  return derive_seed(seed, fnv1a64(label));
}

std::string domain_name(std::size_t k) { return "dom" + std::to_string(k); }

void append_examples(Dataset& ds, const DomainSpec& spec, std::size_t n, double noise, bool labels,
                     Rng& rng) {
  const std::size_t d = spec.theta.size();
  std::vector<double> x(d);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      x[c] = std::sqrt(spec.variances[c]) * rng.normal();
      z += spec.theta[c] * x[c];
    }
    if (noise > 0.0) z += noise * rng.normal();
    ds.features.insert(ds.features.end(), x.begin(), x.end());
    ds.targets.push_back(labels ? (z > 0.0 ? 1.0 : 0.0) : z);
  }
}

std::vector<DomainSpec> draw_specs(const LabConfig& cfg, std::uint64_t seed) {
  Rng rng(stream(seed, "theta"));
  std::vector<double> shared(cfg.shared_dims);
  for (auto& v : shared) v = rng.normal();
  const std::size_t m = cfg.dim - cfg.shared_dims;
  std::vector<DomainSpec> specs;
  for (std::size_t k = 0; k < cfg.n_domains; ++k) {
    DomainSpec s;
    s.domain = domain_name(k);
    s.theta.resize(cfg.dim);
    s.variances.resize(cfg.dim);
    for (std::size_t c = 0; c < cfg.shared_dims; ++c) {
      s.theta[c] = shared[c] + cfg.shared_jitter * rng.normal();
      s.variances[c] = cfg.shared_variance;
    }
    for (std::size_t j = 0; j < m; ++j) {
      const bool own = j * cfg.n_domains / m == k;
      const std::size_t c = cfg.shared_dims + j;
      s.theta[c] = (own ? cfg.own_scale : cfg.other_scale) * rng.normal();
      s.variances[c] = own ? cfg.own_variance : cfg.other_variance;
    }
    specs.push_back(std::move(s));
  }
  return specs;
}

}  // namespace

LabData make_domains(std::size_t n_domains, std::size_t dim, std::uint64_t seed) {
  LabConfig cfg;
  cfg.n_domains = n_domains;
  cfg.dim = dim;
  cfg.shared_dims = std::min(cfg.shared_dims, dim > n_domains ? dim - n_domains : 0);
  return make_domains(cfg, seed);
}

LabData make_domains(const LabConfig& config, std::uint64_t seed) {
  config.validate();
  return make_domains(draw_specs(config, seed), config, seed);
}

LabData make_domains(const std::vector<DomainSpec>& specs, const LabConfig& config, std::uint64_t seed) {
  if (specs.size() < 2) throw InvalidArgument("lab: need at least 2 domains");
  const std::size_t d = specs.front().theta.size();
  if (d < 2) throw InvalidArgument("lab: dimension must be at least 2");
  for (const auto& s : specs) {
    if (s.theta.size() != d || s.variances.size() != d) {
      throw InvalidArgument("lab: domain '" + s.domain + "' has the wrong dimension");
    }
    for (double v : s.variances) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidArgument("lab: variances must be finite");
    }
  }
  const bool labels = config.family == ModelFamily::kLogistic;
  LabData lab;
  lab.specs = specs;
  for (const auto& spec : specs) {
    Dataset ds;
    ds.id = spec.domain;
    ds.domain = spec.domain;
    ds.dim = d;
    ds.generator_seed = stream(seed, "train/" + spec.domain);
    Rng rng(ds.generator_seed);
    append_examples(ds, spec, config.n_train, config.noise, labels, rng);
    lab.candidates.push_back(std::move(ds));
  }

  lab.general.id = "general";
  lab.general.domain = "general";
  lab.general.dim = d;
  lab.general.generator_seed = stream(seed, "general");
  Rng grng(lab.general.generator_seed);
  const std::size_t k = specs.size();
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t n = config.n_train / k + (i < config.n_train % k ? 1 : 0);
    append_examples(lab.general, specs[i], n, config.noise, labels, grng);
  }

  for (const auto& spec : specs) {
    for (std::size_t b = 0; b < config.benchmarks_per_domain; ++b) {
      BenchmarkTask task;
      task.id = spec.domain + "/b" + std::to_string(b);
      task.domain = spec.domain;
      task.rule = labels ? ScoringRule::kAccuracy : ScoringRule::kNegLoss;
      task.eval.id = task.id;
      task.eval.domain = spec.domain;
      task.eval.dim = d;
      task.eval.generator_seed = stream(seed, "bench/" + task.id);
      Rng rng(task.eval.generator_seed);
      append_examples(task.eval, spec, config.n_eval, 0.0, labels, rng);
      lab.benchmarks.push_back(std::move(task));
    }
  }
  return lab;
}

// ---------------------------------------------------------------------------
// Persistence

ParameterSet dataset_to_params(const Dataset& dataset, const std::string& kind) {
  ParameterSet p;
  p.insert("features", {dataset.size(), dataset.dim}, dataset.features);
  p.insert("targets", {dataset.size()}, dataset.targets);
  p.metadata()["id"] = dataset.id;
  p.metadata()["domain"] = dataset.domain;
  p.metadata()["generator_seed"] = std::to_string(dataset.generator_seed);
  p.metadata()["kind"] = kind;
  return p;
}

Dataset dataset_from_params(const ParameterSet& params) {
  if (!params.contains("features") || !params.contains("targets")) {
    throw SchemaError("dataset archive needs 'features' and 'targets'");
  }
  const auto& f = params.at("features");
  const auto& t = params.at("targets");
  if (f.shape.size() != 2 || t.shape.size() != 1 || f.shape[0] != t.shape[0]) {
    throw SchemaError("dataset archive has inconsistent shapes");
  }
  Dataset ds;
  ds.dim = f.shape[1];
  ds.features = f.values;
  ds.targets = t.values;
  const auto& meta = params.metadata();
  auto get = [&](const char* key) {
    auto it = meta.find(key);
    return it == meta.end() ? std::string() : it->second;
  };
  ds.id = get("id");
  ds.domain = get("domain");
  const auto seed = get("generator_seed");
  ds.generator_seed = seed.empty() ? 0 : std::stoull(seed);
  return ds;
}

namespace {

std::string file_key(const std::string& id) {
  std::string s = id;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

}  // namespace

void save_lab(const LabData& lab, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "candidates");
  fs::create_directories(dir / "benchmarks");
  nlohmann::ordered_json manifest;
  manifest["general"] = "general.dmxt";
  save_archive(dataset_to_params(lab.general, "general"), dir / "general.dmxt");
  manifest["candidates"] = nlohmann::ordered_json::array();
  for (const auto& c : lab.candidates) {
    const auto rel = "candidates/" + file_key(c.id) + ".dmxt";
    save_archive(dataset_to_params(c, "candidate"), dir / rel);
    manifest["candidates"].push_back(rel);
  }
  manifest["benchmarks"] = nlohmann::ordered_json::array();
  for (const auto& b : lab.benchmarks) {
    const auto rel = "benchmarks/" + file_key(b.id) + ".dmxt";
    auto p = dataset_to_params(b.eval, "benchmark");
    p.metadata()["rule"] = b.rule == ScoringRule::kAccuracy ? "accuracy" : "neg_loss";
    save_archive(p, dir / rel);
    manifest["benchmarks"].push_back(rel);
  }
  manifest["domains"] = nlohmann::ordered_json::array();
  for (const auto& s : lab.specs) {
    manifest["domains"].push_back({{"domain", s.domain}, {"theta", s.theta}, {"variances", s.variances}});
  }
  std::ofstream out(dir / "lab.json", std::ios::trunc);
  if (!out) throw IoError("cannot write '" + (dir / "lab.json").string() + "'");
  out << manifest.dump(2) << '\n';
}

LabData load_lab(const std::filesystem::path& dir) {
  std::ifstream in(dir / "lab.json");
  if (!in) throw IoError("cannot open '" + (dir / "lab.json").string() + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt lab manifest: " + std::string(e.what()));
  }
  LabData lab;
  try {
    lab.general = dataset_from_params(load_archive(dir / manifest.at("general").get<std::string>()));
    for (const auto& rel : manifest.at("candidates")) {
      lab.candidates.push_back(dataset_from_params(load_archive(dir / rel.get<std::string>())));
    }
    for (const auto& rel : manifest.at("benchmarks")) {
      const auto p = load_archive(dir / rel.get<std::string>());
      BenchmarkTask task;
      task.eval = dataset_from_params(p);
      task.id = task.eval.id;
      task.domain = task.eval.domain;
      auto rule = p.metadata().find("rule");
      task.rule = rule != p.metadata().end() && rule->second == "accuracy" ? ScoringRule::kAccuracy
                                                                         : ScoringRule::kNegLoss;
      lab.benchmarks.push_back(std::move(task));
    }
    for (const auto& s : manifest.at("domains")) {
      lab.specs.push_back({s.at("domain").get<std::string>(), s.at("theta").get<std::vector<double>>(),
                           s.at("variances").get<std::vector<double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt lab manifest: " + std::string(e.what()));
  }
  return lab;
}

// ---------------------------------------------------------------------------
// Models

namespace {

// Flat parameter layout.
//   linear / logistic: weight[d], bias
//   mlp: hidden.weight[h*d], hidden.bias[h], output.weight[h], output.bias
struct Layout {
  bool mlp = false;
  std::size_t d = 0;
  std::size_t h = 0;

  std::size_t size() const { return mlp ? h * d + 2 * h + 1 : d + 1; }
};

Layout layout_of(const ParameterSet& model) {
  Layout l;
  if (model.contains("hidden.weight")) {
    for (const char* name : {"hidden.bias", "output.weight", "output.bias"}) {
      if (!model.contains(name)) throw SchemaError(std::string("mlp model lacks '") + name + "'");
    }
    const auto& w = model.at("hidden.weight").shape;
    if (w.size() != 2 || model.size() != 4) throw SchemaError("malformed mlp model");
    l.mlp = true;
    l.h = w[0];
    l.d = w[1];
    if (model.at("hidden.bias").shape != Shape{l.h} || model.at("output.weight").shape != Shape{l.h} ||
        model.at("output.bias").shape != Shape{1}) {
      throw SchemaError("malformed mlp model");
    }
    return l;
  }
  if (!model.contains("weight") || !model.contains("bias") || model.size() != 2) {
    throw SchemaError("linear model needs exactly 'weight' and 'bias'");
  }
  if (model.at("weight").shape.size() != 1 || model.at("bias").shape != Shape{1}) {
    throw SchemaError("malformed linear model");
  }
  l.d = model.at("weight").shape[0];
  return l;
}

std::vector<double> pack(const ParameterSet& model, const Layout& l) {
  std::vector<double> theta;
  theta.reserve(l.size());
  auto add = [&](const char* name) {
    const auto& v = model.at(name).values;
    theta.insert(theta.end(), v.begin(), v.end());
  };
  if (l.mlp) {
    add("hidden.weight");
    add("hidden.bias");
    add("output.weight");
    add("output.bias");
  } else {
    add("weight");
    add("bias");
  }
  return theta;
}

ParameterSet unpack(const std::vector<double>& theta, const Layout& l, const ParameterSet& like) {
  ParameterSet out;
  auto take = [&](const char* name, std::size_t offset, std::size_t n) {
    out.insert(name, like.at(name).shape,
               std::vector<double>(theta.begin() + static_cast<std::ptrdiff_t>(offset),
                                   theta.begin() + static_cast<std::ptrdiff_t>(offset + n)));
  };
  if (l.mlp) {
    take("hidden.weight", 0, l.h * l.d);
    take("hidden.bias", l.h * l.d, l.h);
    take("output.weight", l.h * l.d + l.h, l.h);
    take("output.bias", l.h * l.d + 2 * l.h, 1);
  } else {
    take("weight", 0, l.d);
    take("bias", l.d, 1);
  }
  out.metadata() = like.metadata();
  return out;
}

// Raw output: the regression value, or the logit.
double forward(const Layout& l, const double* th, const double* x, double* hidden) {
  if (!l.mlp) {
    double z = th[l.d];
    for (std::size_t c = 0; c < l.d; ++c) z += th[c] * x[c];
    return z;
  }
  const double* w = th;
  const double* b = th + l.h * l.d;
  const double* v = b + l.h;
  double out = v[l.h];
  for (std::size_t j = 0; j < l.h; ++j) {
    double z = b[j];
    for (std::size_t c = 0; c < l.d; ++c) z += w[j * l.d + c] * x[c];
    hidden[j] = std::tanh(z);
    out += v[j] * hidden[j];
  }
  return out;
}

// Loss of one example; adds scale * gradient to grad when given.
double example_loss(const Layout& l, bool logistic, const double* th, const double* x, double y,
                    double scale, double* grad, double* hidden) {
  const double out = forward(l, th, x, hidden);
  double loss, dout;
  if (logistic) {
    // log(1 + e^z) - y z, written to stay finite for large |z|
    loss = std::max(out, 0.0) + std::log1p(std::exp(-std::abs(out))) - y * out;
    dout = 1.0 / (1.0 + std::exp(-out)) - y;
  } else {
    const double e = out - y;
    loss = e * e;
    dout = 2.0 * e;
  }
  if (grad != nullptr) {
    const double g = scale * dout;
    if (!l.mlp) {
      for (std::size_t c = 0; c < l.d; ++c) grad[c] += g * x[c];
      grad[l.d] += g;
    } else {
      const double* v = th + l.h * l.d + l.h;
      double* gw = grad;
      double* gb = grad + l.h * l.d;
      double* gv = gb + l.h;
      for (std::size_t j = 0; j < l.h; ++j) {
        gv[j] += g * hidden[j];
        const double gz = g * v[j] * (1.0 - hidden[j] * hidden[j]);
        gb[j] += gz;
        for (std::size_t c = 0; c < l.d; ++c) gw[j * l.d + c] += gz * x[c];
      }
      gv[l.h] += g;
    }
  }
  return loss;
}

void check_mixture(const DatasetMixture& mixture, std::size_t d) {
  if (mixture.empty()) throw InvalidArgument("train: empty mixture");
  std::vector<double> w;
  for (const auto& [ds, weight] : mixture) {
    if (ds == nullptr) throw InvalidArgument("train: null dataset");
    if (ds->dim != d) {
      throw SchemaError("train: dataset '" + ds->id + "' has dimension " + std::to_string(ds->dim) +
                        ", model expects " + std::to_string(d));
    }
    if (weight > 0.0 && ds->size() == 0) throw InvalidArgument("train: dataset '" + ds->id + "' is empty");
    w.push_back(weight);
  }
  MixtureRatio check(w);  // validates the weights
}

double full_loss(const DatasetMixture& mixture, const Layout& l, bool logistic, const double* th,
                 double* grad, std::vector<double>& hidden) {
  double total = 0.0;
  for (const auto& [ds, weight] : mixture) {
    if (weight <= 0.0) continue;
    const double scale = weight / static_cast<double>(ds->size());
    double sum = 0.0;
    for (std::size_t i = 0; i < ds->size(); ++i) {
      sum += example_loss(l, logistic, th, ds->row(i), ds->targets[i], scale, grad, hidden.data());
    }
    total += scale * sum;
  }
  return total;
}

}  // namespace

ParameterSet init_model(ModelFamily family, std::size_t dim, std::size_t hidden, std::uint64_t seed) {
  if (dim == 0) throw InvalidArgument("init_model: zero dimension");
  ParameterSet p;
  if (family == ModelFamily::kMlp1Hidden) {
    if (hidden == 0) throw InvalidArgument("init_model: zero hidden units");
    Rng rng(seed);
    const double s_in = 1.0 / std::sqrt(static_cast<double>(dim));
    const double s_out = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::vector<double> w(hidden * dim), v(hidden);
    for (auto& x : w) x = s_in * rng.normal();
    for (auto& x : v) x = s_out * rng.normal();
    p.insert("hidden.weight", {hidden, dim}, w);
    p.insert("hidden.bias", {hidden}, std::vector<double>(hidden, 0.0));
    p.insert("output.weight", {hidden}, v);
    p.insert("output.bias", {1}, {0.0});
  } else {
    p.insert("weight", {dim}, std::vector<double>(dim, 0.0));
    p.insert("bias", {1}, {0.0});
  }
  p.metadata()["family"] = to_string(family);
  return p;
}

void TrainConfig::validate() const {
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw InvalidArgument("train: step size must be positive");
}

ParameterSet train(const DatasetMixture& mixture, const ParameterSet& init, const TrainConfig& config,
                   std::vector<double>* losses) {
  config.validate();
  const Layout l = layout_of(init);
  if (l.mlp != (config.family == ModelFamily::kMlp1Hidden)) {
    throw SchemaError("train: model schema does not match family " + to_string(config.family));
  }
  check_mixture(mixture, l.d);
  const bool logistic = config.family == ModelFamily::kLogistic;
  if (losses) losses->clear();
  if (config.steps == 0) {
    if (losses) {
      std::vector<double> hidden(l.h + 1);
      losses->push_back(full_loss(mixture, l, logistic, pack(init, l).data(), nullptr, hidden));
    }
    return init;
  }

  std::vector<double> theta = pack(init, l);
  std::vector<double> grad(theta.size());
  std::vector<double> hidden(l.h + 1);
  Rng rng(config.seed);
  const std::size_t m = mixture.size();
  const std::size_t batch = config.batch_size;
  std::vector<double> carry(m, 0.0);
  std::vector<long> counts(m);
  std::vector<double> desired(m);

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    if (batch == 0) {
      loss = full_loss(mixture, l, logistic, theta.data(), grad.data(), hidden);
    } else {
      long assigned = 0;
      for (std::size_t i = 0; i < m; ++i) {
        desired[i] = mixture[i].second > 0.0 ? mixture[i].second * static_cast<double>(batch) + carry[i] : 0.0;
        counts[i] = std::max(0L, static_cast<long>(std::floor(desired[i])));
        assigned += counts[i];
      }
      auto remainder = [&](std::size_t i) { return desired[i] - static_cast<double>(counts[i]); };
      while (assigned < static_cast<long>(batch)) {
        std::size_t best = m;
        for (std::size_t i = 0; i < m; ++i) {
          if (mixture[i].second > 0.0 && (best == m || remainder(i) > remainder(best))) best = i;
        }
        ++counts[best];
        ++assigned;
      }
      while (assigned > static_cast<long>(batch)) {
        std::size_t worst = m;
        for (std::size_t i = 0; i < m; ++i) {
          if (counts[i] > 0 && (worst == m || remainder(i) < remainder(worst))) worst = i;
        }
        --counts[worst];
        --assigned;
      }
      const double scale = 1.0 / static_cast<double>(batch);
      for (std::size_t i = 0; i < m; ++i) {
        carry[i] = desired[i] - static_cast<double>(counts[i]);
        const Dataset& ds = *mixture[i].first;
        for (long s = 0; s < counts[i]; ++s) {
          const auto r = static_cast<std::size_t>(rng.below(ds.size()));
          loss += scale * example_loss(l, logistic, theta.data(), ds.row(r), ds.targets[r], scale,
                                       grad.data(), hidden.data());
        }
      }
    }
    if (!std::isfinite(loss)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + " (loss " +
                              std::to_string(loss) + ")",
                          static_cast<long>(step));
    }
    if (losses) losses->push_back(loss);
    for (std::size_t k = 0; k < theta.size(); ++k) theta[k] -= config.step_size * grad[k];
  }
  const double final_loss = full_loss(mixture, l, logistic, theta.data(), nullptr, hidden);
  if (!std::isfinite(final_loss) || !kernels::all_finite(theta)) {
    throw TrainingError("training diverged at step " + std::to_string(config.steps),
                        static_cast<long>(config.steps));
  }
  if (losses) losses->push_back(final_loss);
  ParameterSet out = unpack(theta, l, init);
  out.metadata()["family"] = to_string(config.family);
  return out;
}

double mixture_loss(const DatasetMixture& mixture, const ParameterSet& model) {
  const Layout l = layout_of(model);
  check_mixture(mixture, l.d);
  auto it = model.metadata().find("family");
  const bool logistic = it != model.metadata().end() && it->second == to_string(ModelFamily::kLogistic);
  std::vector<double> hidden(l.h + 1);
  return full_loss(mixture, l, logistic, pack(model, l).data(), nullptr, hidden);
}

double lipschitz_constant(const DatasetMixture& mixture, ModelFamily family) {
  if (mixture.empty()) throw InvalidArgument("lipschitz_constant: empty mixture");
  const std::size_t d = mixture.front().first->dim;
  check_mixture(mixture, d);
  const std::size_t n = d + 1;
  // Weighted second moment of [x, 1].
  std::vector<double> m(n * n, 0.0);
  for (const auto& [ds, weight] : mixture) {
    if (weight <= 0.0) continue;
    const double scale = weight / static_cast<double>(ds->size());
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const double* x = ds->row(i);
      for (std::size_t a = 0; a < n; ++a) {
        const double xa = a < d ? x[a] : 1.0;
        for (std::size_t b = 0; b < n; ++b) m[a * n + b] += scale * xa * (b < d ? x[b] : 1.0);
      }
    }
  }
  // Power iteration; the matrix is symmetric positive semidefinite.
  std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n))), w(n);
  double lambda = 0.0;
  for (int it = 0; it < 1000; ++it) {
    for (std::size_t a = 0; a < n; ++a) {
      w[a] = 0.0;
      for (std::size_t b = 0; b < n; ++b) w[a] += m[a * n + b] * v[b];
    }
    double norm = 0.0, rq = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      norm += w[a] * w[a];
      rq += v[a] * w[a];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    for (std::size_t a = 0; a < n; ++a) v[a] = w[a] / norm;
    const bool converged = std::abs(rq - lambda) <= 1e-13 * std::abs(rq);
    lambda = rq;
    if (converged) break;
  }
  return family == ModelFamily::kLogistic ? 0.25 * lambda : 2.0 * lambda;
}

std::map<std::string, double> evaluate_model(const ParameterSet& model,
                                             const std::vector<BenchmarkTask>& tasks) {
  const Layout l = layout_of(model);
  const auto theta = pack(model, l);
  std::vector<double> hidden(l.h + 1);
  std::map<std::string, double> scores;
  for (const auto& task : tasks) {
    const Dataset& ds = task.eval;
    if (ds.dim != l.d) {
      throw SchemaError("evaluate_model: benchmark '" + task.id + "' has dimension " +
                        std::to_string(ds.dim) + ", model expects " + std::to_string(l.d));
    }
    if (ds.size() == 0) throw InvalidArgument("evaluate_model: benchmark '" + task.id + "' is empty");
    double score;
    if (task.rule == ScoringRule::kAccuracy) {
      std::size_t correct = 0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const double z = forward(l, theta.data(), ds.row(i), hidden.data());
        if ((z > 0.0 ? 1.0 : 0.0) == ds.targets[i]) ++correct;
      }
      score = 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
    } else {
      double mean = 0.0;
      for (double y : ds.targets) mean += y;
      mean /= static_cast<double>(ds.size());
      double var = 0.0, mse = 0.0;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const double e = forward(l, theta.data(), ds.row(i), hidden.data()) - ds.targets[i];
        mse += e * e;
        var += (ds.targets[i] - mean) * (ds.targets[i] - mean);
      }
      mse /= static_cast<double>(ds.size());
      var /= static_cast<double>(ds.size());
      score = 100.0 / (1.0 + mse / (var > 0.0 ? var : 1.0));
    }
    scores[task.id] = score;
  }
  return scores;
}

// ---------------------------------------------------------------------------
// Two-stage protocol

void LabTrainingConfig::validate() const {
  if (!(general_mix_beta >= 0.0 && general_mix_beta <= 1.0)) {
    throw InvalidArgument("lab training: beta must lie in [0, 1]");
  }
  if (!(base_step_scale > 0.0) || !(step_scale > 0.0)) {
    throw InvalidArgument("lab training: step scales must be positive");
  }
  if (family == ModelFamily::kMlp1Hidden && hidden == 0) {
    throw InvalidArgument("lab training: mlp needs hidden units");
  }
}

double lab_lipschitz(const LabData& lab, ModelFamily family) {
  double l = lipschitz_constant({{&lab.general, 1.0}}, family);
  for (const auto& c : lab.candidates) l = std::max(l, lipschitz_constant({{&c, 1.0}}, family));
  return l;
}

namespace {

TrainConfig stage_config(const LabTrainingConfig& cfg, double lipschitz, bool base) {
  TrainConfig t;
  t.family = cfg.family;
  t.steps = base ? cfg.base_steps : cfg.steps;
  t.step_size = (base ? cfg.base_step_scale : cfg.step_scale) / lipschitz;
  t.batch_size = base ? cfg.base_batch_size : cfg.batch_size;
  return t;
}

}  // namespace

ParameterSet train_base(const LabData& lab, const LabTrainingConfig& config) {
  config.validate();
  const double lip = lab_lipschitz(lab, config.family);
  TrainConfig t = stage_config(config, lip, true);
  t.seed = stream(config.seed, "base");
  const ParameterSet init = init_model(config.family, lab.general.dim, config.hidden, stream(config.seed, "init"));
  return train({{&lab.general, 1.0}}, init, t);
}

PreparedComponents prepare_components(const LabData& lab, const LabTrainingConfig& config) {
  return prepare_components(lab, train_base(lab, config), config);
}

PreparedComponents prepare_components(const LabData& lab, const ParameterSet& base,
                                      const LabTrainingConfig& config) {
  config.validate();
  if (lab.candidates.empty()) throw InvalidArgument("prepare_components: no candidates");
  PreparedComponents out;
  out.base = base;
  TrainConfig t = stage_config(config, lab_lipschitz(lab, config.family), false);
  t.seed = stream(config.seed, "component");
  out.step_size = t.step_size;
  const double beta = config.general_mix_beta;
  out.components.resize(lab.candidates.size());
  const auto n = static_cast<std::ptrdiff_t>(lab.candidates.size());
  std::vector<std::exception_ptr> errors(lab.candidates.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    try {
      out.components[i] = train({{&lab.general, beta}, {&lab.candidates[i], 1.0 - beta}}, base, t);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (const auto& c : out.components) out.deltas.push_back(compute_delta(c, base));
  return out;
}

ParameterSet train_reference(const LabData& lab, const ParameterSet& base, const MixtureRatio& ratio,
                             const LabTrainingConfig& config) {
  config.validate();
  if (ratio.size() != lab.candidates.size()) {
    throw InvalidArgument("train_reference: ratio has " + std::to_string(ratio.size()) + " weights for " +
                          std::to_string(lab.candidates.size()) + " candidates");
  }
  TrainConfig t = stage_config(config, lab_lipschitz(lab, config.family), false);
  t.seed = stream(config.seed, "reference");
  const double beta = config.general_mix_beta;
  DatasetMixture mixture{{&lab.general, beta}};
  for (std::size_t i = 0; i < ratio.size(); ++i) mixture.emplace_back(&lab.candidates[i], (1.0 - beta) * ratio[i]);
  return train(mixture, base, t);
}

namespace {

std::string model_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "ref%03zu", i);
  return buf;
}

}  // namespace

std::map<std::string, std::string> benchmark_domains(const LabData& lab) {
  std::map<std::string, std::string> out;
  for (const auto& b : lab.benchmarks) out[b.id] = b.domain;
  return out;
}

ScoreTable build_reference_set(const LabData& lab, const ParameterSet& base,
                               const std::vector<MixtureRatio>& ratios, const LabTrainingConfig& config,
                               bool parallel, std::vector<ParameterSet>* models) {
  if (ratios.empty()) throw InvalidArgument("build_reference_set: no ratios");
  std::vector<ParameterSet> trained(ratios.size());
  std::vector<std::map<std::string, double>> rows(ratios.size());
  std::vector<std::exception_ptr> errors(ratios.size());
  const auto n = static_cast<std::ptrdiff_t>(ratios.size());
#pragma omp parallel for schedule(dynamic, 1) if (parallel)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    try {
      trained[i] = train_reference(lab, base, ratios[i], config);
      rows[i] = evaluate_model(trained[i], lab.benchmarks);
    } catch (const TrainingError& e) {
      errors[i] = std::make_exception_ptr(
          TrainingError(std::string(e.what()) + " for ratio " + ratios[i].to_string(), e.step()));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  ScoreTable table;
  table.domain_of = benchmark_domains(lab);
  for (std::size_t i = 0; i < rows.size(); ++i) table.rows[model_id(i)] = std::move(rows[i]);
  if (models) *models = std::move(trained);
  return table;
}

ScoreTable build_proxy_set(const LabData& lab, const PreparedComponents& prepared,
                           const std::vector<MixtureRatio>& ratios) {
  if (ratios.empty()) throw InvalidArgument("build_proxy_set: no ratios");
  ScoreTable table;
  table.domain_of = benchmark_domains(lab);
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    table.rows[model_id(i)] = evaluate_model(merge_linear(prepared.components, ratios[i]), lab.benchmarks);
  }
  return table;
}

}  // namespace demix
