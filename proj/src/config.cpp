#include "demix/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "demix/errors.hpp"
#include "demix/tensor_store.hpp"

namespace demix {

namespace pt = boost::property_tree;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Pulls typed values out of one section and remembers which keys were used.
class Section {
 public:
  Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  bool has(const std::string& key) const { return tree_ && tree_->find(key) != tree_->not_found(); }

  std::optional<std::string> raw(const std::string& key) {
    if (!tree_) return std::nullopt;
    auto it = tree_->find(key);
    if (it == tree_->not_found()) return std::nullopt;
    used_.insert(key);
    return trim(it->second.data());
  }

  void get(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }

  void get(const std::string& key, std::filesystem::path& out) {
    if (auto v = raw(key)) out = *v;
  }

  void get(const std::string& key, double& out) {
    auto v = raw(key);
    if (!v) return;
    double x = 0.0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
    if (ec != std::errc() || p != v->data() + v->size() || !std::isfinite(x)) bad(key, *v, "a number");
    out = x;
  }

  template <class Int>
    requires std::is_integral_v<Int>
  void get(const std::string& key, Int& out) {
    auto v = raw(key);
    if (!v) return;
    out = parse_int<Int>(key, *v);
  }

  void get_bool(const std::string& key, bool& out) {
    auto v = raw(key);
    if (!v) return;
    if (*v == "true" || *v == "yes" || *v == "1" || *v == "on") {
      out = true;
    } else if (*v == "false" || *v == "no" || *v == "0" || *v == "off") {
      out = false;
    } else {
      bad(key, *v, "a boolean");
    }
  }

  void get_list(const std::string& key, std::vector<std::size_t>& out) {
    auto v = raw(key);
    if (!v) return;
    out.clear();
    std::stringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int<std::size_t>(key, trim(item)));
    if (out.empty()) bad(key, *v, "a comma-separated list of counts");
  }

  template <class F>
  void wrap(const std::string& key, F&& f) {
    auto v = raw(key);
    if (!v) return;
    try {
      f(*v);
    } catch (const InvalidArgument& e) {
      throw ConfigError("[" + name_ + "] " + key + ": " + e.what());
    }
  }

  void reject_unused() const {
    if (!tree_) return;
    for (const auto& [key, child] : *tree_) {
      if (!used_.count(key)) throw ConfigError("unknown key '" + key + "' in [" + name_ + "]");
    }
  }

  [[noreturn]] void bad(const std::string& key, const std::string& value, const char* what) const {
    throw ConfigError("[" + name_ + "] " + key + ": '" + value + "' is not " + what);
  }

 private:
  template <class Int>
  Int parse_int(const std::string& key, const std::string& v) const {
    Int x{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
      bad(key, v, std::is_signed_v<Int> ? "an integer" : "a nonnegative integer");
    }
    return x;
  }

  const pt::ptree* tree_;
  std::string name_;
  std::set<std::string> used_;
};

const char* const kSections[] = {"run", "dedup", "lab", "training", "references", "search", "merge"};

std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

class Writer {
 public:
  void line(const std::string& key, const std::string& value) { out_ += key + " = " + value + "\n"; }
  void line(const std::string& key, double v) { line(key, fmt_double(v)); }
  void line(const std::string& key, std::uint64_t v) { line(key, std::to_string(v)); }
  void line(const std::string& key, int v) { line(key, std::to_string(v)); }
  std::string str() const { return out_; }

 private:
  std::string out_;
};

}  // namespace

void ExperimentConfig::validate() const {
  auto check = [](const char* section, auto&& f) {
    try {
      f();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("[") + section + "] " + e.what());
    }
  };
  if (dedup.enabled && dedup.input.empty()) throw ConfigError("[dedup] enabled without an input");
  check("lab", [&] { lab.lab.validate(); });
  check("training", [&] { training.validate(); });
  if (training.family != lab.lab.family) {
    throw ConfigError("[training] family must match [lab] family");
  }
  if (references.enabled && references.count < 8) {
    // top-quartile correlation needs at least 8 models
    throw ConfigError("[references] count must be at least 8");
  }
  check("search", [&] {
    search.plan.validate();
    search.gbdt.validate();
  });
  if (search.anchors < 1) throw ConfigError("[search] anchors must be positive");
  check("merge", [&] { merge.validate(); });
}

std::string ExperimentConfig::section(const std::string& name) const {
  Writer w;
  if (name == "run") {
    w.line("seed", seed);
    w.line("output_root", output_root.generic_string());
  } else if (name == "dedup") {
    w.line("enabled", fmt_bool(dedup.enabled));
    w.line("input", dedup.input.generic_string());
    w.line("mode", to_string(dedup.mode));
    w.line("seed", dedup.seed);
  } else if (name == "lab") {
    const auto& c = lab.lab;
    w.line("n_domains", std::uint64_t{c.n_domains});
    w.line("dim", std::uint64_t{c.dim});
    w.line("shared_dims", std::uint64_t{c.shared_dims});
    w.line("n_train", std::uint64_t{c.n_train});
    w.line("n_eval", std::uint64_t{c.n_eval});
    w.line("benchmarks_per_domain", std::uint64_t{c.benchmarks_per_domain});
    w.line("noise", c.noise);
    w.line("shared_variance", c.shared_variance);
    w.line("own_variance", c.own_variance);
    w.line("other_variance", c.other_variance);
    w.line("own_scale", c.own_scale);
    w.line("other_scale", c.other_scale);
    w.line("shared_jitter", c.shared_jitter);
    w.line("family", to_string(c.family));
    w.line("seed", lab.seed);
  } else if (name == "training") {
    const auto& t = training;
    w.line("family", to_string(t.family));
    w.line("hidden", std::uint64_t{t.hidden});
    w.line("beta", t.general_mix_beta);
    w.line("base_steps", std::uint64_t{t.base_steps});
    w.line("base_step_scale", t.base_step_scale);
    w.line("base_batch_size", std::uint64_t{t.base_batch_size});
    w.line("steps", std::uint64_t{t.steps});
    w.line("step_scale", t.step_scale);
    w.line("batch_size", std::uint64_t{t.batch_size});
    w.line("seed", t.seed);
  } else if (name == "references") {
    w.line("enabled", fmt_bool(references.enabled));
    w.line("count", std::uint64_t{references.count});
    w.line("seed", references.seed);
    w.line("parallel", fmt_bool(references.parallel));
  } else if (name == "search") {
    const auto& s = search;
    w.line("plan", join_counts(s.plan.per_iteration_counts));
    w.line("pool", std::uint64_t{s.plan.final_candidate_pool});
    w.line("top_k", std::uint64_t{s.plan.top_k_average});
    w.line("seed", s.plan.rng_seed);
    w.line("learning_rate", s.gbdt.learning_rate);
    w.line("n_rounds", s.gbdt.n_rounds);
    w.line("max_depth", s.gbdt.tree.max_depth);
    w.line("min_samples_leaf", std::uint64_t{s.gbdt.tree.min_samples_leaf});
    w.line("anchors", std::uint64_t{s.anchors});
    w.line("anchor_seed", s.anchor_seed);
    w.line("parallel_evaluations", fmt_bool(s.parallel_evaluations));
  } else if (name == "merge") {
    w.line("method", to_string(merge.method));
    w.line("seed", merge.seed);
    for (const auto& key : MergeSpec::keys(merge.method)) w.line(key, merge.param(key));
  } else {
    throw InvalidArgument("unknown config section '" + name + "'");
  }
  return w.str();
}

std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const char* name : kSections) {
    if (!out.empty()) out += "\n";
    out += "[" + std::string(name) + "]\n" + section(name);
  }
  return out;
}

std::string ExperimentConfig::hash() const {
  ExperimentConfig c = *this;
  c.output_root.clear();
  return sha256_hex(c.canonical());
}

std::filesystem::path ExperimentConfig::resolve(const std::filesystem::path& p) const {
  if (p.empty() || p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  std::set<std::string> known(std::begin(kSections), std::end(kSections));
  for (const auto& [name, child] : tree) {
    if (!known.count(name)) throw ConfigError("unknown section [" + name + "]");
    if (!child.data().empty()) throw ConfigError("key '" + name + "' outside a section");
  }
  auto section = [&](const char* name) {
    auto it = tree.find(name);
    return Section(it == tree.not_found() ? nullptr : &it->second, name);
  };

  ExperimentConfig c;
  c.base_dir = base_dir;

  auto run = section("run");
  run.get("seed", c.seed);
  run.get("output_root", c.output_root);
  run.reject_unused();
  // section seeds follow the run seed unless given
  c.dedup.seed = c.lab.seed = c.training.seed = c.references.seed = c.seed;
  c.search.plan.rng_seed = c.search.anchor_seed = c.merge.seed = c.seed;

  auto dedup = section("dedup");
  dedup.get_bool("enabled", c.dedup.enabled);
  dedup.get("input", c.dedup.input);
  dedup.wrap("mode", [&](const std::string& v) { c.dedup.mode = parse_dedup_mode(v); });
  dedup.get("seed", c.dedup.seed);
  dedup.reject_unused();

  auto lab = section("lab");
  auto& l = c.lab.lab;
  lab.get("n_domains", l.n_domains);
  lab.get("dim", l.dim);
  lab.get("shared_dims", l.shared_dims);
  lab.get("n_train", l.n_train);
  lab.get("n_eval", l.n_eval);
  lab.get("benchmarks_per_domain", l.benchmarks_per_domain);
  lab.get("noise", l.noise);
  lab.get("shared_variance", l.shared_variance);
  lab.get("own_variance", l.own_variance);
  lab.get("other_variance", l.other_variance);
  lab.get("own_scale", l.own_scale);
  lab.get("other_scale", l.other_scale);
  lab.get("shared_jitter", l.shared_jitter);
  lab.wrap("family", [&](const std::string& v) { l.family = parse_model_family(v); });
  lab.get("seed", c.lab.seed);
  lab.reject_unused();

  auto training = section("training");
  auto& t = c.training;
  t.family = l.family;
  training.wrap("family", [&](const std::string& v) { t.family = parse_model_family(v); });
  training.get("hidden", t.hidden);
  training.get("beta", t.general_mix_beta);
  training.get("base_steps", t.base_steps);
  training.get("base_step_scale", t.base_step_scale);
  training.get("base_batch_size", t.base_batch_size);
  training.get("steps", t.steps);
  training.get("step_scale", t.step_scale);
  training.get("batch_size", t.batch_size);
  training.get("seed", t.seed);
  training.reject_unused();

  auto refs = section("references");
  refs.get_bool("enabled", c.references.enabled);
  refs.get("count", c.references.count);
  refs.get("seed", c.references.seed);
  refs.get_bool("parallel", c.references.parallel);
  refs.reject_unused();

  auto search = section("search");
  auto& s = c.search;
  search.get_list("plan", s.plan.per_iteration_counts);
  search.get("pool", s.plan.final_candidate_pool);
  search.get("top_k", s.plan.top_k_average);
  search.get("seed", s.plan.rng_seed);
  search.get("learning_rate", s.gbdt.learning_rate);
  search.get("n_rounds", s.gbdt.n_rounds);
  search.get("max_depth", s.gbdt.tree.max_depth);
  search.get("min_samples_leaf", s.gbdt.tree.min_samples_leaf);
  search.get("anchors", s.anchors);
  search.get("anchor_seed", s.anchor_seed);
  search.get_bool("parallel_evaluations", s.parallel_evaluations);
  search.reject_unused();

  auto merge = section("merge");
  merge.wrap("method", [&](const std::string& v) { c.merge.method = parse_merge_method(v); });
  merge.get("seed", c.merge.seed);
  for (const auto& key : MergeSpec::keys(c.merge.method)) {
    if (merge.has(key)) {
      double v = 0.0;
      merge.get(key, v);
      c.merge.hyperparams[key] = v;
    }
  }
  merge.reject_unused();

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto dir = path.parent_path();
  return parse_config(ss.str(), dir.empty() ? std::filesystem::path(".") : dir);
}

}  // namespace demix
