#include "demix/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

#include "demix/dedup.hpp"
#include "demix/errors.hpp"
#include "demix/random.hpp"
#include "demix/tensor_store.hpp"

namespace demix {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(StageStatus status) {
  switch (status) {
    case StageStatus::kPending: return "pending";
    case StageStatus::kDone: return "done";
    case StageStatus::kFailed: return "failed";
  }
  return "unknown";
}

StageStatus parse_stage_status(const std::string& name) {
  for (auto s : {StageStatus::kPending, StageStatus::kDone, StageStatus::kFailed}) {
    if (to_string(s) == name) return s;
  }
  throw FormatError("unknown stage status '" + name + "'");
}

const StageRecord* ExperimentManifest::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

StageRecord* ExperimentManifest::stage(const std::string& name) {
  return const_cast<StageRecord*>(std::as_const(*this).stage(name));
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out.flush()) throw IoError("cannot write '" + path.string() + "'");
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("corrupt " + what + ": " + e.what());
  }
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_key(const std::string& id) {
  std::string s = id;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

std::string row_name(const std::string& prefix, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return prefix + buf;
}

// Sorted files below run_dir/sub, relative to run_dir.
std::vector<std::string> files_under(const fs::path& run_dir, const std::string& sub) {
  std::vector<std::string> out;
  const fs::path root = run_dir / sub;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), run_dir).generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Empty when any artifact is missing.
std::string artifacts_hash(const fs::path& run_dir, const std::vector<std::string>& artifacts) {
  std::string acc;
  for (const auto& a : artifacts) {
    const fs::path p = run_dir / a;
    if (!fs::is_regular_file(p)) return {};
    acc += a + '\t' + sha256_file(p) + '\n';
  }
  return sha256_hex(acc);
}

json ratios_json(const std::vector<MixtureRatio>& ratios, const std::vector<std::string>& ids) {
  json j;
  j["candidates"] = ids;
  j["ratios"] = json::array();
  for (const auto& r : ratios) j["ratios"].push_back(r.weights());
  return j;
}

std::vector<MixtureRatio> ratios_from_json(const json& j) {
  std::vector<MixtureRatio> out;
  const auto ids = j.at("candidates").get<std::vector<std::string>>();
  for (const auto& r : j.at("ratios")) out.emplace_back(r.get<std::vector<double>>(), ids);
  return out;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

json correlation_object(const CorrelationReport& r) {
  json j;
  j["per_domain_rho"] = r.per_domain_rho;
  j["macro_avg_rho"] = r.macro_avg_rho;
  j["top_quartile_rho"] = json::object();
  for (const auto& [d, v] : r.top_quartile_rho) j["top_quartile_rho"][d] = opt(v);
  j["top_quartile_macro"] = opt(r.top_quartile_macro);
  j["capability_recovery"] = r.capability_recovery;
  return j;
}

CorrelationReport correlation_from_json(const json& j) {
  CorrelationReport r;
  r.per_domain_rho = j.at("per_domain_rho").get<std::map<std::string, double>>();
  r.macro_avg_rho = j.at("macro_avg_rho").get<double>();
  for (const auto& [d, v] : j.at("top_quartile_rho").items()) r.top_quartile_rho[d] = opt_from(v);
  r.top_quartile_macro = opt_from(j.at("top_quartile_macro"));
  r.capability_recovery = j.at("capability_recovery").get<double>();
  return r;
}

bool same(const CorrelationReport& a, const CorrelationReport& b) {
  return a.per_domain_rho == b.per_domain_rho && a.macro_avg_rho == b.macro_avg_rho &&
         a.top_quartile_rho == b.top_quartile_rho && a.top_quartile_macro == b.top_quartile_macro &&
         a.capability_recovery == b.capability_recovery;
}

std::map<std::string, double> domain_means(const std::map<std::string, double>& scores,
                                           const std::map<std::string, std::string>& domain_of) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [bench, s] : scores) {
    auto& a = acc[domain_of.at(bench)];
    a.first += s;
    ++a.second;
  }
  std::map<std::string, double> out;
  for (const auto& [d, a] : acc) out[d] = a.first / static_cast<double>(a.second);
  return out;
}

// ---------------------------------------------------------------------------
// Stage state: artifacts from skipped stages are loaded on first use.

struct Context {
  const ExperimentConfig& cfg;
  fs::path dir;
  std::optional<LabData> lab;
  std::optional<PreparedComponents> comps;

  LabData& get_lab() {
    if (!lab) lab = load_lab(dir / "lab");
    return *lab;
  }

  std::vector<std::string> ids() {
    std::vector<std::string> out;
    for (const auto& c : get_lab().candidates) out.push_back(c.id);
    return out;
  }

  PreparedComponents& get_components() {
    if (!comps) comps = load_components(dir / "components");
    return *comps;
  }
};

struct Stage {
  std::string name;
  std::vector<std::string> sections;
  std::vector<std::string> upstream;
  std::vector<std::string> owned;  // subdirectories or root files
  std::function<void(Context&)> run;
};

std::vector<std::string> stage_artifacts(const fs::path& dir, const Stage& stage) {
  std::vector<std::string> out;
  for (const auto& o : stage.owned) {
    if (fs::is_directory(dir / o)) {
      auto f = files_under(dir, o);
      out.insert(out.end(), f.begin(), f.end());
    } else if (fs::is_regular_file(dir / o)) {
      out.push_back(o);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void run_dedup(Context& c) {
  const auto input = c.cfg.resolve(c.cfg.dedup.input);
  const auto docs = load_documents_jsonl(input);
  const auto result = dedup_corpus(docs, c.cfg.dedup.mode, c.cfg.dedup.seed);
  write_text(c.dir / "dedup/report.json", dedup_report_json(result, c.cfg.dedup.mode, c.cfg.dedup.seed));
  std::set<std::string> kept(result.kept.begin(), result.kept.end());
  std::string lines;
  for (const auto& d : docs) {
    if (!kept.count(d.id)) continue;
    json j;
    j["id"] = d.id;
    j["text"] = d.text;
    lines += j.dump() + '\n';
  }
  write_text(c.dir / "dedup/kept.jsonl", lines);
}

void run_lab(Context& c) {
  c.lab = make_domains(c.cfg.lab.lab, c.cfg.lab.seed);
  save_lab(*c.lab, c.dir / "lab");
}

void run_components(Context& c) {
  auto& lab = c.get_lab();
  c.comps = prepare_components(lab, c.cfg.training);
  save_components(*c.comps, lab, c.dir / "components");
}

void run_references(Context& c) {
  auto& lab = c.get_lab();
  const auto ratios = reference_ratios(c.cfg.references, c.ids());
  const auto table = build_reference_set(lab, c.get_components().base, ratios, c.cfg.training,
                                         c.cfg.references.parallel);
  save_ratios(ratios, c.dir / "references/ratios.json");
  save_score_csv(table, c.dir / "references/scores.csv");
  save_domain_csv(table, c.dir / "references/domains.csv");
}

void run_search_stage(Context& c) {
  search_mixture(c.get_lab(), c.get_components(), c.cfg.search, c.cfg.merge, c.dir / "search");
}

void run_consistency(Context& c) {
  auto& lab = c.get_lab();
  const auto ratios = load_ratios(c.dir / "references/ratios.json");
  const auto reference =
      load_score_csv(c.dir / "references/scores.csv", c.dir / "references/domains.csv");
  const auto proxy = proxy_table(lab, c.get_components(), c.cfg.merge, ratios, "ref");
  const auto report = consistency_report(reference, proxy);
  json j = correlation_object(report);
  j["reference_count"] = ratios.size();
  write_text(c.dir / "consistency/proxy_scores.csv", score_csv_text(proxy));
  write_text(c.dir / "consistency/report.json", j.dump(2) + '\n');
}

std::string stage_input_hash(const ExperimentConfig& cfg, const Stage& stage,
                             const ExperimentManifest& manifest) {
  std::string text = "stage " + stage.name + "\n";
  for (const auto& s : stage.sections) text += "[" + s + "]\n" + cfg.section(s);
  for (const auto& u : stage.upstream) {
    const auto* rec = manifest.stage(u);
    text += "upstream " + u + " " + (rec ? rec->output_hash : std::string("-")) + "\n";
  }
  if (stage.name == "dedup") text += "input " + sha256_file(cfg.resolve(cfg.dedup.input)) + "\n";
  if (stage.name == "report") text += "config " + cfg.hash() + "\n";
  return sha256_hex(text);
}

// Shared stage cache: <output_root>/.cache/<stage>-<input hash>/ holds a copy
// of the stage's artifacts and index.json with the output hash.
bool restore_stage(const fs::path& entry, const fs::path& dir, StageRecord& rec) {
  if (!fs::is_regular_file(entry / "index.json")) return false;
  try {
    const auto index = json::parse(read_text(entry / "index.json"));
    const auto artifacts = index.at("artifacts").get<std::vector<std::string>>();
    for (const auto& a : artifacts) {
      fs::create_directories((dir / a).parent_path());
      fs::copy_file(entry / "files" / a, dir / a, fs::copy_options::overwrite_existing);
    }
    if (artifacts_hash(dir, artifacts) != index.at("output_hash").get<std::string>()) return false;
    rec.artifacts = artifacts;
    rec.output_hash = index.at("output_hash").get<std::string>();
    rec.status = StageStatus::kDone;
    return true;
  } catch (const std::exception&) {
    return false;  // a damaged entry is recomputed
  }
}

void store_stage(const fs::path& entry, const fs::path& dir, const StageRecord& rec) {
  if (fs::exists(entry)) return;
  std::error_code ec;
  const fs::path tmp = entry.string() + ".tmp-" + std::to_string(::getpid());
  try {
    fs::remove_all(tmp);
    for (const auto& a : rec.artifacts) {
      fs::create_directories((tmp / "files" / a).parent_path());
      fs::copy_file(dir / a, tmp / "files" / a);
    }
    json index;
    index["artifacts"] = rec.artifacts;
    index["output_hash"] = rec.output_hash;
    write_text(tmp / "index.json", index.dump(2) + '\n');
    fs::rename(tmp, entry, ec);
  } catch (const std::exception&) {
  }
  fs::remove_all(tmp, ec);  // lost a race or failed; the cache is optional
}

void log_line(const PipelineOptions& options, const std::string& line) {
  if (options.log) *options.log << line << '\n' << std::flush;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string correlation_json(const CorrelationReport& report) {
  return correlation_object(report).dump(2) + '\n';
}

void save_components(const PreparedComponents& p, const LabData& lab, const fs::path& dir) {
  if (p.components.size() != lab.candidates.size()) {
    throw InvalidArgument("save_components: one component per candidate expected");
  }
  fs::create_directories(dir);
  save_archive(p.base, dir / "base.dmxt");
  json info;
  info["base"] = "base.dmxt";
  info["candidates"] = json::array();
  info["files"] = json::array();
  info["delta_magnitudes"] = json::array();
  for (std::size_t i = 0; i < p.components.size(); ++i) {
    const auto file = file_key(lab.candidates[i].id) + ".dmxt";
    save_archive(p.components[i], dir / file);
    info["candidates"].push_back(lab.candidates[i].id);
    info["files"].push_back(file);
    info["delta_magnitudes"].push_back(delta_magnitude(p.components[i], p.base));
  }
  info["step_size"] = p.step_size;
  write_text(dir / "info.json", info.dump(2) + '\n');
}

PreparedComponents load_components(const fs::path& dir) {
  const auto info = parse_json(read_text(dir / "info.json"), (dir / "info.json").string());
  PreparedComponents p;
  try {
    p.base = load_archive(dir / info.at("base").get<std::string>());
    for (const auto& f : info.at("files")) {
      p.components.push_back(load_archive(dir / f.get<std::string>()));
      p.deltas.push_back(compute_delta(p.components.back(), p.base));
    }
    p.step_size = info.at("step_size").get<double>();
  } catch (const json::exception& e) {
    throw FormatError("corrupt components index: " + std::string(e.what()));
  }
  if (p.components.empty()) throw FormatError("components index lists no components");
  return p;
}

std::vector<MixtureRatio> reference_ratios(const ReferenceStageConfig& config,
                                           const std::vector<std::string>& ids) {
  return sample_simplex(ids.size(), config.count, derive_seed(config.seed, fnv1a64("reference_ratios")),
                        ids);
}

void save_ratios(const std::vector<MixtureRatio>& ratios, const fs::path& path) {
  if (ratios.empty()) throw InvalidArgument("save_ratios: no ratios");
  write_text(path, ratios_json(ratios, ratios.front().candidate_ids()).dump(2) + '\n');
}

std::vector<MixtureRatio> load_ratios(const fs::path& path) {
  const auto j = parse_json(read_text(path), path.string());
  try {
    return ratios_from_json(j);
  } catch (const json::exception& e) {
    throw FormatError("corrupt ratio file: " + std::string(e.what()));
  }
}

SearchResult search_mixture(const LabData& lab, const PreparedComponents& comps,
                            const SearchStageConfig& s, const MergeSpec& merge_spec,
                            const fs::path& out_dir) {
  std::vector<std::string> ids;
  for (const auto& c : lab.candidates) ids.push_back(c.id);
  if (comps.components.size() != ids.size()) {
    throw InvalidArgument("search: the lab has " + std::to_string(ids.size()) + " candidates but " +
                          std::to_string(comps.components.size()) + " components were given");
  }
  const auto anchors =
      sample_simplex(ids.size(), s.anchors, derive_seed(s.anchor_seed, fnv1a64("anchors")), ids);
  const ProxyEvaluator evaluator(lab, comps, merge_spec,
                                 proxy_table(lab, comps, merge_spec, anchors, "anchor"));
  SearchOptions options;
  options.parallel_evaluations = s.parallel_evaluations;
  auto result = run_search(std::cref(evaluator), s.plan, s.gbdt, ids, options);

  const auto final_scores = evaluator.scores(result.mixture);
  const auto rank = rank_against(evaluator.population(), final_scores);
  const auto domains = domain_means(final_scores, evaluator.population().domain_of);
  double macro = 0.0;
  for (const auto& [d, v] : domains) macro += v;
  macro /= static_cast<double>(domains.size());

  json r;
  r["candidates"] = ids;
  r["mixture"] = result.mixture.weights();
  r["predicted_ranking_score"] = result.predicted_score;
  r["evaluations"] = result.transcript.entries.size();
  r["plan"] = s.plan.per_iteration_counts;
  r["final_pool"] = s.plan.final_candidate_pool;
  r["top_k"] = s.plan.top_k_average;
  r["benchmark_scores"] = final_scores;
  r["domain_scores"] = domains;
  r["macro_score"] = macro;
  r["domain_ranks"] = rank.per_domain;
  r["macro_rank"] = rank.macro;
  r["population_size"] = evaluator.population().rows.size();

  save_ratios(anchors, out_dir / "anchors.json");
  write_text(out_dir / "anchor_scores.csv", score_csv_text(evaluator.population()));
  write_text(out_dir / "transcript.jsonl", transcript_jsonl(result.transcript, ids));
  write_text(out_dir / "result.json", r.dump(2) + '\n');
  return result;
}

std::string manifest_json(const ExperimentManifest& m) {
  json j;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["artifacts"] = m.artifacts;
  j["stages"] = json::array();
  for (const auto& s : m.stages) {
    json st;
    st["name"] = s.name;
    st["status"] = to_string(s.status);
    st["input_hash"] = s.input_hash;
    if (s.status == StageStatus::kDone) st["output_hash"] = s.output_hash;
    if (s.status == StageStatus::kFailed) st["message"] = s.message;
    st["artifacts"] = s.artifacts;
    j["stages"].push_back(st);
  }
  j["created_at"] = m.created_at;
  j["updated_at"] = m.updated_at;
  return j.dump(2) + '\n';
}

ExperimentManifest parse_manifest_json(const std::string& text) {
  const auto j = parse_json(text, "manifest");
  ExperimentManifest m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    for (const auto& st : j.at("stages")) {
      StageRecord r;
      r.name = st.at("name").get<std::string>();
      r.status = parse_stage_status(st.at("status").get<std::string>());
      r.input_hash = st.at("input_hash").get<std::string>();
      r.output_hash = st.value("output_hash", "");
      r.message = st.value("message", "");
      r.artifacts = st.at("artifacts").get<std::vector<std::string>>();
      m.stages.push_back(std::move(r));
    }
    m.created_at = j.at("created_at").get<std::string>();
    m.updated_at = j.at("updated_at").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("corrupt manifest: " + std::string(e.what()));
  }
  return m;
}

ExperimentManifest load_manifest(const fs::path& path) { return parse_manifest_json(read_text(path)); }

RunLock::RunLock(const fs::path& dir) : path_(dir / "manifest.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw PipelineError("run directory is locked: " + path_.string() +
                          " exists (remove it if no run is active)");
    }
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

fs::path run_directory(const ExperimentConfig& config) {
  return config.resolve(config.output_root) / config.hash().substr(0, 16);
}

ProxyEvaluator::ProxyEvaluator(const LabData& lab, const PreparedComponents& components, MergeSpec spec,
                               ScoreTable population)
    : lab_(&lab), components_(&components), spec_(std::move(spec)), population_(std::move(population)) {
  spec_.validate();
  population_.validate();
}

std::map<std::string, double> ProxyEvaluator::scores(const MixtureRatio& ratio) const {
  const auto merged = merge(components_->components, ratio, spec_, &components_->base);
  return evaluate_model(merged, lab_->benchmarks);
}

ProxyEvaluation ProxyEvaluator::operator()(const MixtureRatio& ratio) const {
  ProxyEvaluation e;
  e.ratio = ratio;
  e.per_benchmark_scores = scores(ratio);
  e.ranking_score = rank_against(population_, e.per_benchmark_scores).macro;
  return e;
}

ScoreTable proxy_table(const LabData& lab, const PreparedComponents& components, const MergeSpec& spec,
                       const std::vector<MixtureRatio>& ratios, const std::string& prefix) {
  if (ratios.empty()) throw InvalidArgument("proxy_table: no ratios");
  ScoreTable table;
  table.domain_of = benchmark_domains(lab);
  std::vector<std::map<std::string, double>> rows(ratios.size());
  const auto n = static_cast<std::ptrdiff_t>(ratios.size());
  std::vector<std::exception_ptr> errors(ratios.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    try {
      rows[i] = evaluate_model(merge(components.components, ratios[i], spec, &components.base),
                               lab.benchmarks);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) table.rows[row_name(prefix, i)] = std::move(rows[i]);
  return table;
}

PipelineRun run_pipeline(const ExperimentConfig& config, const PipelineOptions& options) {
  config.validate();
  PipelineRun out;
  out.run_dir = run_directory(config);
  const fs::path& dir = out.run_dir;
  RunLock lock(dir);

  ExperimentManifest previous;
  const fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      previous = load_manifest(manifest_path);
    } catch (const FormatError&) {
      log_line(options, "manifest unreadable, starting over");
    }
  }

  std::vector<Stage> stages;
  if (config.dedup.enabled) stages.push_back({"dedup", {"dedup"}, {}, {"dedup"}, run_dedup});
  stages.push_back({"lab", {"lab"}, {}, {"lab"}, run_lab});
  stages.push_back({"components", {"training"}, {"lab"}, {"components"}, run_components});
  if (config.references.enabled) {
    stages.push_back(
        {"references", {"references", "training"}, {"lab", "components"}, {"references"}, run_references});
  }
  stages.push_back({"search", {"search", "merge"}, {"lab", "components"}, {"search"}, run_search_stage});
  if (config.references.enabled) {
    stages.push_back(
        {"consistency", {"merge"}, {"lab", "components", "references"}, {"consistency"}, run_consistency});
  }

  auto& m = out.manifest;
  m.config_hash = config.hash();
  m.config = config.canonical();
  m.seed = config.seed;
  m.created_at = previous.created_at.empty() ? utc_now() : previous.created_at;
  auto carry = [&](const std::string& name) {
    if (const auto* old = previous.stage(name)) return *old;
    StageRecord fresh;
    fresh.name = name;
    return fresh;
  };
  for (const auto& s : stages) m.stages.push_back(carry(s.name));
  m.stages.push_back(carry("report"));

  if (config.dedup.enabled) {
    m.artifacts["dedup_report"] = "dedup/report.json";
    m.artifacts["dedup_kept"] = "dedup/kept.jsonl";
  }
  m.artifacts["config"] = "config.ini";
  m.artifacts["lab"] = "lab/lab.json";
  m.artifacts["components"] = "components/info.json";
  if (config.references.enabled) {
    m.artifacts["reference_scores"] = "references/scores.csv";
    m.artifacts["consistency_report"] = "consistency/report.json";
  }
  m.artifacts["transcript"] = "search/transcript.jsonl";
  m.artifacts["search_result"] = "search/result.json";
  m.artifacts["report_json"] = "report.json";
  m.artifacts["report_text"] = "report.txt";

  auto save = [&] {
    m.updated_at = utc_now();
    write_text(manifest_path, manifest_json(m));
  };
  write_text(dir / "config.ini", config.canonical());

  Context ctx{config, dir, std::nullopt, std::nullopt};
  const fs::path cache_root = config.resolve(config.output_root) / ".cache";
  auto report_stage = Stage{"report", {}, {"search"}, {"report.json", "report.txt"}, nullptr};
  if (config.references.enabled) report_stage.upstream.push_back("consistency");
  report_stage.run = [&](Context&) {
    const auto summary = report(m, dir);
    write_text(dir / "report.json", report_json(summary));
    write_text(dir / "report.txt", report_text(summary));
  };
  stages.push_back(report_stage);

  for (const auto& stage : stages) {
    StageRecord& rec = *m.stage(stage.name);
    std::string input_hash;
    try {
      input_hash = stage_input_hash(config, stage, m);
    } catch (const std::exception& e) {
      rec.status = StageStatus::kFailed;
      rec.message = e.what();
      save();
      throw;
    }
    if (rec.status == StageStatus::kDone && rec.input_hash == input_hash && !rec.artifacts.empty() &&
        artifacts_hash(dir, rec.artifacts) == rec.output_hash) {
      out.cached.push_back(stage.name);
      log_line(options, "stage " + stage.name + ": cached");
      continue;
    }
    rec.status = StageStatus::kPending;
    rec.input_hash = input_hash;
    rec.output_hash.clear();
    rec.message.clear();
    for (const auto& o : stage.owned) fs::remove_all(dir / o);
    const fs::path entry = cache_root / (stage.name + "-" + input_hash.substr(0, 32));
    if (options.shared_cache && restore_stage(entry, dir, rec)) {
      out.restored.push_back(stage.name);
      log_line(options, "stage " + stage.name + ": restored from the shared cache");
      save();
      continue;
    }
    for (const auto& o : stage.owned) fs::remove_all(dir / o);  // leftovers of a failed restore
    log_line(options, "stage " + stage.name + ": running");
    try {
      stage.run(ctx);
    } catch (const std::exception& e) {
      rec.status = StageStatus::kFailed;
      rec.message = e.what();
      rec.artifacts.clear();
      save();
      log_line(options, "stage " + stage.name + ": failed: " + e.what());
      throw;
    }
    rec.artifacts = stage_artifacts(dir, stage);
    rec.output_hash = artifacts_hash(dir, rec.artifacts);
    rec.status = StageStatus::kDone;
    out.executed.push_back(stage.name);
    if (options.shared_cache) store_stage(entry, dir, rec);
    save();
  }
  save();
  return out;
}

PipelineRun run_pipeline(const fs::path& config_path, const PipelineOptions& options) {
  return run_pipeline(load_config(config_path), options);
}

// ---------------------------------------------------------------------------

bool ReportSummary::operator==(const ReportSummary& o) const {
  if (consistency.has_value() != o.consistency.has_value()) return false;
  if (consistency && !same(*consistency, *o.consistency)) return false;
  return config_hash == o.config_hash && seed == o.seed && candidates == o.candidates &&
         mixture == o.mixture && predicted_ranking_score == o.predicted_ranking_score &&
         domain_scores == o.domain_scores && macro_score == o.macro_score &&
         domain_ranks == o.domain_ranks && macro_rank == o.macro_rank &&
         population_size == o.population_size && budget == o.budget &&
         reference_count == o.reference_count;
}

ReportSummary report(const ExperimentManifest& manifest, const fs::path& run_dir) {
  const auto* search = manifest.stage("search");
  if (!search || search->status != StageStatus::kDone) {
    throw PipelineError("incomplete manifest: the search stage is not done");
  }
  const auto r = parse_json(read_text(run_dir / "search/result.json"), "search/result.json");
  ReportSummary s;
  try {
    s.config_hash = manifest.config_hash;
    s.seed = manifest.seed;
    s.candidates = r.at("candidates").get<std::vector<std::string>>();
    s.mixture = r.at("mixture").get<std::vector<double>>();
    s.predicted_ranking_score = r.at("predicted_ranking_score").get<double>();
    s.domain_scores = r.at("domain_scores").get<std::map<std::string, double>>();
    s.macro_score = r.at("macro_score").get<double>();
    s.domain_ranks = r.at("domain_ranks").get<std::map<std::string, double>>();
    s.macro_rank = r.at("macro_rank").get<double>();
    s.population_size = r.at("population_size").get<std::size_t>();
    s.budget.plan = r.at("plan").get<std::vector<std::size_t>>();
    for (auto c : s.budget.plan) s.budget.planned += c;
    s.budget.used = r.at("evaluations").get<std::size_t>();
    s.budget.final_pool = r.at("final_pool").get<std::size_t>();
    s.budget.top_k = r.at("top_k").get<std::size_t>();
    const auto* cons = manifest.stage("consistency");
    if (cons && cons->status == StageStatus::kDone) {
      const auto c = parse_json(read_text(run_dir / "consistency/report.json"), "consistency report");
      s.consistency = correlation_from_json(c);
      s.reference_count = c.at("reference_count").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError("corrupt search artifacts: " + std::string(e.what()));
  }
  return s;
}

ReportSummary report(const fs::path& manifest_path) {
  auto dir = manifest_path.parent_path();
  return report(load_manifest(manifest_path), dir.empty() ? fs::path(".") : dir);
}

std::string report_json(const ReportSummary& s) {
  json j;
  j["config_hash"] = s.config_hash;
  j["seed"] = s.seed;
  j["candidates"] = s.candidates;
  j["mixture"] = s.mixture;
  j["predicted_ranking_score"] = s.predicted_ranking_score;
  j["metrics"]["domain_scores"] = s.domain_scores;
  j["metrics"]["macro_score"] = s.macro_score;
  j["metrics"]["domain_ranks"] = s.domain_ranks;
  j["metrics"]["macro_rank"] = s.macro_rank;
  j["metrics"]["population_size"] = s.population_size;
  j["budget"]["plan"] = s.budget.plan;
  j["budget"]["planned"] = s.budget.planned;
  j["budget"]["used"] = s.budget.used;
  j["budget"]["final_pool"] = s.budget.final_pool;
  j["budget"]["top_k"] = s.budget.top_k;
  if (s.consistency) {
    j["consistency"] = correlation_object(*s.consistency);
    j["consistency"]["reference_count"] = s.reference_count;
  } else {
    j["consistency"] = nullptr;
  }
  return j.dump(2) + '\n';
}

ReportSummary parse_report_json(const std::string& text) {
  const auto j = parse_json(text, "report");
  ReportSummary s;
  try {
    s.config_hash = j.at("config_hash").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.candidates = j.at("candidates").get<std::vector<std::string>>();
    s.mixture = j.at("mixture").get<std::vector<double>>();
    s.predicted_ranking_score = j.at("predicted_ranking_score").get<double>();
    const auto& m = j.at("metrics");
    s.domain_scores = m.at("domain_scores").get<std::map<std::string, double>>();
    s.macro_score = m.at("macro_score").get<double>();
    s.domain_ranks = m.at("domain_ranks").get<std::map<std::string, double>>();
    s.macro_rank = m.at("macro_rank").get<double>();
    s.population_size = m.at("population_size").get<std::size_t>();
    const auto& b = j.at("budget");
    s.budget.plan = b.at("plan").get<std::vector<std::size_t>>();
    s.budget.planned = b.at("planned").get<std::size_t>();
    s.budget.used = b.at("used").get<std::size_t>();
    s.budget.final_pool = b.at("final_pool").get<std::size_t>();
    s.budget.top_k = b.at("top_k").get<std::size_t>();
    if (!j.at("consistency").is_null()) {
      s.consistency = correlation_from_json(j.at("consistency"));
      s.reference_count = j.at("consistency").at("reference_count").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw FormatError("corrupt report: " + std::string(e.what()));
  }
  if (s.mixture.size() != s.candidates.size()) throw FormatError("corrupt report: mixture length");
  return s;
}

std::string report_text(const ReportSummary& s) {
  std::string out;
  char buf[256];
  auto add = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof buf, fmt, args...);
    out += buf;
  };
  add("run %s (seed %llu)\n\n", s.config_hash.substr(0, 16).c_str(),
      static_cast<unsigned long long>(s.seed));
  out += "mixture\n";
  for (std::size_t i = 0; i < s.candidates.size(); ++i) {
    add("  %-12s %.6f\n", s.candidates[i].c_str(), s.mixture[i]);
  }
  add("predicted ranking score  %.4f\n\n", s.predicted_ranking_score);
  add("merged proxy at the mixture (ranked among %zu anchors)\n", s.population_size);
  for (const auto& [d, v] : s.domain_scores) {
    add("  %-12s score %8.4f   rank %6.2f\n", d.c_str(), v, s.domain_ranks.at(d));
  }
  add("  %-12s score %8.4f   rank %6.2f\n\n", "macro", s.macro_score, s.macro_rank);
  std::string plan;
  for (std::size_t i = 0; i < s.budget.plan.size(); ++i) plan += (i ? "/" : "") + std::to_string(s.budget.plan[i]);
  add("budget  %zu of %zu proxy evaluations (plan %s), final pool %zu, top-%zu average\n",
      s.budget.used, s.budget.planned, plan.c_str(), s.budget.final_pool, s.budget.top_k);
  if (s.consistency) {
    const auto& c = *s.consistency;
    add("\nconsistency over %zu reference models\n", s.reference_count);
    for (const auto& [d, rho] : c.per_domain_rho) {
      const auto& tq = c.top_quartile_rho.at(d);
      if (tq) {
        add("  %-12s rho %7.4f   top-25%% rho %7.4f\n", d.c_str(), rho, *tq);
      } else {
        add("  %-12s rho %7.4f   top-25%% rho n/a\n", d.c_str(), rho);
      }
    }
    add("  %-12s rho %7.4f", "macro", c.macro_avg_rho);
    if (c.top_quartile_macro) {
      add("   top-25%% rho %7.4f\n", *c.top_quartile_macro);
    } else {
      out += "   top-25% rho n/a\n";
    }
    add("  capability recovery %.4f\n", c.capability_recovery);
  }
  return out;
}

}  // namespace demix
