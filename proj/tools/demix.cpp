// demix: command-line front end for the tensor store, merging, search,
// evaluation, dedup and the experiment pipeline.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "demix/config.hpp"
#include "demix/dedup.hpp"
#include "demix/errors.hpp"
#include "demix/merge.hpp"
#include "demix/metrics.hpp"
#include "demix/pipeline.hpp"
#include "demix/search.hpp"
#include "demix/tensor_store.hpp"
#include "demix/toy_lab.hpp"

namespace fs = std::filesystem;
using namespace demix;
using json = nlohmann::ordered_json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text)) throw IoError("cannot write '" + path.string() + "'");
}

std::vector<double> parse_doubles(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (item.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw InvalidArgument("'" + item + "' is not a number");
    }
  }
  return out;
}

ExperimentConfig config_or_default(const std::string& path) {
  if (path.empty()) return parse_config("");
  return load_config(path);
}

// ---------------------------------------------------------------------------
// tensor

int tensor_inspect(const fs::path& file, bool as_json) {
  const auto header = read_archive_header(file);
  if (as_json) {
    json j;
    j["format_version"] = header.format_version;
    j["metadata"] = header.metadata;
    j["tensors"] = json::array();
    for (const auto& t : header.tensors) {
      j["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}, {"length", t.length}});
    }
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::printf("format version %u, %zu tensors\n", header.format_version, header.tensors.size());
  for (const auto& [k, v] : header.metadata) std::printf("  meta %s = %s\n", k.c_str(), v.c_str());
  for (const auto& t : header.tensors) {
    std::printf("  %-32s %-16s %zu values\n", t.name.c_str(), shape_string(t.shape).c_str(),
                shape_numel(t.shape));
  }
  return 0;
}

int tensor_checksum(const fs::path& file) {
  const auto params = load_archive(file);
  std::printf("%s  %s\n", fingerprint(params).c_str(), file.string().c_str());
  for (const auto& [name, t] : params) std::printf("  %s  %s\n", tensor_checksum(t).c_str(), name.c_str());
  return 0;
}

// Exit 0 when bitwise equal, 1 otherwise.
int tensor_diff(const fs::path& a_path, const fs::path& b_path) {
  const auto a = load_archive(a_path);
  const auto b = load_archive(b_path);
  bool differ = false;
  for (const auto& [name, t] : a) {
    if (!b.contains(name)) {
      std::printf("only in %s: %s\n", a_path.string().c_str(), name.c_str());
      differ = true;
      continue;
    }
    const auto& u = b.at(name);
    if (u.shape != t.shape) {
      std::printf("%s: shape %s vs %s\n", name.c_str(), shape_string(t.shape).c_str(),
                  shape_string(u.shape).c_str());
      differ = true;
      continue;
    }
    double max_abs = 0.0;
    std::size_t changed = 0;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double d = std::fabs(t.values[i] - u.values[i]);
      if (t.values[i] != u.values[i]) ++changed;
      max_abs = std::max(max_abs, d);
    }
    if (changed) {
      std::printf("%s: %zu of %zu values differ, max |diff| %.6g\n", name.c_str(), changed,
                  t.values.size(), max_abs);
      differ = true;
    }
  }
  for (const auto& [name, t] : b) {
    if (!a.contains(name)) {
      std::printf("only in %s: %s\n", b_path.string().c_str(), name.c_str());
      differ = true;
    }
  }
  if (!differ) {
    std::puts("identical");
    return 0;
  }
  try {
    require_same_schema(a, b, "diff");
    std::printf("delta magnitude %.6g\n", delta_magnitude(b, a));
  } catch (const SchemaError&) {
  }
  return 1;
}

// ---------------------------------------------------------------------------

int do_merge(const std::vector<std::string>& inputs, const std::string& weights,
             const std::string& method, const std::string& base_path,
             const std::vector<std::string>& params, std::uint64_t seed, const fs::path& out) {
  std::vector<ParameterSet> comps;
  for (const auto& p : inputs) comps.push_back(load_archive(p));
  const auto w = weights.empty() ? MixtureRatio::uniform(comps.size()).weights() : parse_doubles(weights);
  if (w.size() != comps.size()) throw InvalidArgument("need one weight per component");
  MergeSpec spec;
  spec.method = parse_merge_method(method);
  spec.seed = seed;
  for (const auto& kv : params) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--param expects key=value, got '" + kv + "'");
    const auto v = parse_doubles(kv.substr(eq + 1));
    if (v.size() != 1) throw InvalidArgument("--param expects one value, got '" + kv + "'");
    spec.hyperparams[kv.substr(0, eq)] = v[0];
  }
  ParameterSet base;
  if (!base_path.empty()) base = load_archive(base_path);
  auto merged = merge(comps, MixtureRatio(w), spec, base_path.empty() ? nullptr : &base);
  merged.metadata()["merge_method"] = to_string(spec.method);
  save_archive(merged, out);
  std::printf("%s  %s\n", fingerprint(merged).c_str(), out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------

int do_search(const fs::path& components_dir, fs::path lab_dir, const std::string& config_path,
              const std::vector<std::size_t>& plan, std::size_t pool, std::size_t top_k,
              std::uint64_t seed, std::size_t anchors, const fs::path& out_dir) {
  auto cfg = config_or_default(config_path);
  if (!plan.empty()) cfg.search.plan.per_iteration_counts = plan;
  if (pool) cfg.search.plan.final_candidate_pool = pool;
  if (top_k) cfg.search.plan.top_k_average = top_k;
  cfg.search.plan.rng_seed = seed;
  if (anchors) cfg.search.anchors = anchors;
  cfg.validate();
  if (lab_dir.empty()) lab_dir = components_dir.parent_path() / "lab";
  const auto lab = load_lab(lab_dir);
  const auto comps = load_components(components_dir);
  const auto result = search_mixture(lab, comps, cfg.search, cfg.merge, out_dir);
  std::printf("mixture %s\n", result.mixture.to_string().c_str());
  std::printf("evaluations %zu, predicted ranking score %.4f\n", result.transcript.entries.size(),
              result.predicted_score);
  return 0;
}

// ---------------------------------------------------------------------------

int eval_tables(const fs::path& reference, const fs::path& proxy, const fs::path& domains,
                bool as_json) {
  const auto ref = load_score_csv(reference, domains);
  const auto prx = load_score_csv(proxy, domains);
  const auto r = consistency_report(ref, prx);
  if (as_json) {
    std::cout << correlation_json(r);
    return 0;
  }
  for (const auto& [d, rho] : r.per_domain_rho) std::printf("%-12s rho %.4f\n", d.c_str(), rho);
  std::printf("macro rho %.4f\n", r.macro_avg_rho);
  if (r.top_quartile_macro) std::printf("top-25%% rho %.4f\n", *r.top_quartile_macro);
  std::printf("capability recovery %.4f\n", r.capability_recovery);
  return 0;
}

int eval_model(const fs::path& model, const fs::path& lab_dir) {
  const auto lab = load_lab(lab_dir);
  const auto scores = evaluate_model(load_archive(model), lab.benchmarks);
  json j = scores;
  std::cout << j.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int do_dedup(const fs::path& in, const std::string& mode_name, std::uint64_t seed, const fs::path& report,
             const fs::path& kept_out) {
  const auto mode = parse_dedup_mode(mode_name);
  const auto docs = load_documents_jsonl(in);
  const auto result = dedup_corpus(docs, mode, seed);
  const auto text = dedup_report_json(result, mode, seed);
  if (report.empty()) {
    std::cout << text;
  } else {
    write_file(report, text);
  }
  if (!kept_out.empty()) {
    std::set<std::string> kept(result.kept.begin(), result.kept.end());
    std::string lines;
    for (const auto& d : docs) {
      if (kept.count(d.id)) lines += json{{"id", d.id}, {"text", d.text}}.dump() + '\n';
    }
    write_file(kept_out, lines);
  }
  std::fprintf(stderr, "%zu documents, %zu kept, %zu removed, %zu clusters\n", docs.size(),
               result.kept.size(), result.removed.size(), result.clusters.size());
  return 0;
}

// ---------------------------------------------------------------------------

int lab_gen(const std::string& config, const fs::path& out) {
  const auto cfg = config_or_default(config);
  const auto lab = make_domains(cfg.lab.lab, cfg.lab.seed);
  save_lab(lab, out);
  std::printf("%zu candidates, %zu benchmarks -> %s\n", lab.candidates.size(), lab.benchmarks.size(),
              out.string().c_str());
  return 0;
}

int lab_components(const std::string& config, const fs::path& lab_dir, const fs::path& out) {
  const auto cfg = config_or_default(config);
  const auto lab = load_lab(lab_dir);
  const auto prepared = prepare_components(lab, cfg.training);
  save_components(prepared, lab, out);
  for (std::size_t i = 0; i < prepared.components.size(); ++i) {
    std::printf("%-12s delta magnitude %.4f\n", lab.candidates[i].id.c_str(),
                delta_magnitude(prepared.components[i], prepared.base));
  }
  return 0;
}

int lab_references(const std::string& config, const fs::path& lab_dir, const fs::path& comps_dir,
                   std::size_t count, const fs::path& out) {
  auto cfg = config_or_default(config);
  if (count) cfg.references.count = count;
  const auto lab = load_lab(lab_dir);
  const auto comps = load_components(comps_dir);
  std::vector<std::string> ids;
  for (const auto& c : lab.candidates) ids.push_back(c.id);
  const auto ratios = reference_ratios(cfg.references, ids);
  const auto table = build_reference_set(lab, comps.base, ratios, cfg.training, cfg.references.parallel);
  save_ratios(ratios, out / "ratios.json");
  save_score_csv(table, out / "scores.csv");
  save_domain_csv(table, out / "domains.csv");
  std::printf("%zu reference models -> %s\n", ratios.size(), out.string().c_str());
  return 0;
}

int lab_evaluate(const std::string& config, const fs::path& lab_dir, const fs::path& comps_dir,
                 const fs::path& refs_dir, bool as_json) {
  const auto cfg = config_or_default(config);
  const auto lab = load_lab(lab_dir);
  const auto comps = load_components(comps_dir);
  const auto ratios = load_ratios(refs_dir / "ratios.json");
  const auto reference = load_score_csv(refs_dir / "scores.csv", refs_dir / "domains.csv");
  const auto proxy = proxy_table(lab, comps, cfg.merge, ratios, "ref");
  const auto r = consistency_report(reference, proxy);
  if (as_json) {
    std::cout << correlation_json(r);
  } else {
    for (const auto& [d, rho] : r.per_domain_rho) std::printf("%-12s rho %.4f\n", d.c_str(), rho);
    std::printf("macro rho %.4f, capability recovery %.4f\n", r.macro_avg_rho, r.capability_recovery);
  }
  return 0;
}

// ---------------------------------------------------------------------------

int do_run(const fs::path& config, bool quiet) {
  PipelineOptions options;
  if (!quiet) options.log = &std::cerr;
  const auto run = run_pipeline(config, options);
  std::printf("%s\n", (run.run_dir / "manifest.json").string().c_str());
  return 0;
}

int do_report(const fs::path& manifest, bool as_json) {
  const auto summary = report(manifest);
  std::cout << (as_json ? report_json(summary) : report_text(summary));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"demix: decoupled data mixture search with merged proxy models"};
  app.require_subcommand(1);
  int status = 0;

  // tensor
  auto* tensor = app.add_subcommand("tensor", "Inspect, checksum or diff tensor archives");
  tensor->require_subcommand(1);
  std::string t_file, t_other;
  bool t_json = false;
  auto* inspect = tensor->add_subcommand("inspect", "Print an archive header");
  inspect->add_option("file", t_file, "Archive")->required();
  inspect->add_flag("--json", t_json, "JSON output");
  inspect->callback([&] { status = tensor_inspect(t_file, t_json); });
  auto* checksum = tensor->add_subcommand("checksum", "Fingerprint and per-tensor SHA-256");
  checksum->add_option("file", t_file, "Archive")->required();
  checksum->callback([&] { status = tensor_checksum(t_file); });
  auto* diff = tensor->add_subcommand("diff", "Compare two archives (exit 1 when they differ)");
  diff->add_option("a", t_file, "First archive")->required();
  diff->add_option("b", t_other, "Second archive")->required();
  diff->callback([&] { status = tensor_diff(t_file, t_other); });

  // merge
  auto* merge_cmd = app.add_subcommand("merge", "Merge component archives under a mixture ratio");
  std::vector<std::string> m_inputs, m_params;
  std::string m_weights, m_method = "linear", m_base, m_out;
  std::uint64_t m_seed = 0;
  merge_cmd->add_option("--components", m_inputs, "Component archives")->required();
  merge_cmd->add_option("--weights", m_weights, "Comma-separated ratio (default uniform)");
  merge_cmd->add_option("--method", m_method, "linear, multi_slerp, ties, dare, breadcrumbs, della");
  merge_cmd->add_option("--base", m_base, "Base archive (needed by delta methods)");
  merge_cmd->add_option("--param", m_params, "Hyperparameter key=value");
  merge_cmd->add_option("--seed", m_seed, "Seed for stochastic methods");
  merge_cmd->add_option("--out", m_out, "Output archive")->required();
  merge_cmd->callback([&] { status = do_merge(m_inputs, m_weights, m_method, m_base, m_params, m_seed, m_out); });

  // search
  auto* search_cmd = app.add_subcommand("search", "Search a mixture over trained components");
  std::string s_components, s_lab, s_config, s_out;
  std::vector<std::size_t> s_plan;
  std::size_t s_pool = 0, s_topk = 0, s_anchors = 0;
  std::uint64_t s_seed = 0;
  search_cmd->add_option("--components", s_components, "Components directory")->required();
  search_cmd->add_option("--lab", s_lab, "Lab directory (default: ../lab next to the components)");
  search_cmd->add_option("--config", s_config, "Config for search and merge settings");
  search_cmd->add_option("--plan", s_plan, "Evaluations per iteration")->delimiter(',');
  search_cmd->add_option("--pool", s_pool, "Final candidate pool size");
  search_cmd->add_option("--topk", s_topk, "Top-k averaged for the final mixture");
  search_cmd->add_option("--seed", s_seed, "Search seed");
  search_cmd->add_option("--anchors", s_anchors, "Ranking population size");
  search_cmd->add_option("--out", s_out, "Output directory")->required();
  search_cmd->callback([&] {
    status = do_search(s_components, s_lab, s_config, s_plan, s_pool, s_topk, s_seed, s_anchors, s_out);
  });

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Consistency of proxy vs reference scores, or score one model");
  std::string e_ref, e_proxy, e_domains, e_model, e_lab;
  bool e_json = false;
  eval_cmd->add_option("--reference", e_ref, "Reference scores CSV");
  eval_cmd->add_option("--proxy", e_proxy, "Proxy scores CSV");
  eval_cmd->add_option("--domains", e_domains, "Benchmark to domain CSV");
  eval_cmd->add_option("--model", e_model, "Model archive to score");
  eval_cmd->add_option("--lab", e_lab, "Lab directory with the benchmarks");
  eval_cmd->add_flag("--json", e_json, "JSON output");
  eval_cmd->callback([&] {
    if (!e_model.empty()) {
      if (e_lab.empty()) throw CLI::RequiredError("--lab");
      status = eval_model(e_model, e_lab);
    } else {
      if (e_ref.empty() || e_proxy.empty() || e_domains.empty()) {
        throw CLI::RequiredError("--reference, --proxy and --domains (or --model and --lab)");
      }
      status = eval_tables(e_ref, e_proxy, e_domains, e_json);
    }
  });

  // dedup
  auto* dedup_cmd = app.add_subcommand("dedup", "Exact and MinHash-LSH deduplication of a JSONL corpus");
  std::string d_in, d_mode = "both", d_report, d_kept;
  std::uint64_t d_seed = 0;
  dedup_cmd->add_option("--in", d_in, "Line-delimited JSON with id and text")->required();
  dedup_cmd->add_option("--mode", d_mode, "exact, fuzzy or both");
  dedup_cmd->add_option("--seed", d_seed, "Hash family seed");
  dedup_cmd->add_option("--report", d_report, "Report path (default stdout)");
  dedup_cmd->add_option("--kept", d_kept, "Write surviving documents here");
  dedup_cmd->callback([&] { status = do_dedup(d_in, d_mode, d_seed, d_report, d_kept); });

  // lab
  auto* lab_cmd = app.add_subcommand("lab", "Toy lab: datasets, components, references");
  lab_cmd->require_subcommand(1);
  std::string l_config, l_lab, l_components, l_references, l_out;
  std::size_t l_count = 0;
  bool l_json = false;
  auto* gen = lab_cmd->add_subcommand("gen", "Generate domains, general data and benchmarks");
  gen->add_option("--config", l_config, "Experiment config ([lab] section)");
  gen->add_option("--out", l_out, "Output directory")->required();
  gen->callback([&] { status = lab_gen(l_config, l_out); });
  auto* tc = lab_cmd->add_subcommand("train-components", "Train the base and one component per candidate");
  tc->add_option("--config", l_config, "Experiment config ([training] section)");
  tc->add_option("--lab", l_lab, "Lab directory")->required();
  tc->add_option("--out", l_out, "Output directory")->required();
  tc->callback([&] { status = lab_components(l_config, l_lab, l_out); });
  auto* tr = lab_cmd->add_subcommand("train-references", "Train reference models on sampled mixtures");
  tr->add_option("--config", l_config, "Experiment config ([training], [references])");
  tr->add_option("--lab", l_lab, "Lab directory")->required();
  tr->add_option("--components", l_components, "Components directory (for the base)")->required();
  tr->add_option("--count", l_count, "Number of reference mixtures");
  tr->add_option("--out", l_out, "Output directory")->required();
  tr->callback([&] { status = lab_references(l_config, l_lab, l_components, l_count, l_out); });
  auto* ev = lab_cmd->add_subcommand("evaluate", "Consistency of merged proxies against references");
  ev->add_option("--config", l_config, "Experiment config ([merge] section)");
  ev->add_option("--lab", l_lab, "Lab directory")->required();
  ev->add_option("--components", l_components, "Components directory")->required();
  ev->add_option("--references", l_references, "References directory")->required();
  ev->add_flag("--json", l_json, "JSON output");
  ev->callback([&] { status = lab_evaluate(l_config, l_lab, l_components, l_references, l_json); });

  // run / report
  auto* run_cmd = app.add_subcommand("run", "Run the full pipeline for a config");
  std::string r_config;
  bool r_quiet = false;
  run_cmd->add_option("--config", r_config, "Experiment config")->required();
  run_cmd->add_flag("--quiet", r_quiet, "No stage log on stderr");
  run_cmd->callback([&] { status = do_run(r_config, r_quiet); });

  auto* report_cmd = app.add_subcommand("report", "Summarize a finished run");
  std::string p_manifest;
  bool p_json = false;
  report_cmd->add_option("--manifest", p_manifest, "manifest.json of a run")->required();
  report_cmd->add_flag("--json", p_json, "JSON output");
  report_cmd->callback([&] { status = do_report(p_manifest, p_json); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "demix: %s\n", e.what());
    return exit_code(e);
  }
  return status;
}
