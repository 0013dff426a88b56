#include "demix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "demix/errors.hpp"

namespace demix {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i..j (0-based) share ranks i+1..j+1
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw InvalidArgument("spearman_rho: length mismatch");
  if (xs.size() < 2) throw InvalidArgument("spearman_rho: need at least 2 points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  // Mid-ranks always average to (n + 1) / 2.
  const double mean = 0.5 * (n + 1.0);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateError("degenerate ranking: no rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::vector<std::string> top_quartile_models(const ModelScores& reference) {
  std::vector<std::pair<std::string, double>> entries(reference.begin(), reference.end());
  // Map order gives ascending ids; stable sort keeps it for equal scores.
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t k = (entries.size() + 3) / 4;
  std::vector<std::string> top;
  for (std::size_t i = 0; i < k; ++i) top.push_back(entries[i].first);
  return top;
}

}  // namespace

double top_quartile_rho(const ModelScores& reference_scores, const ModelScores& proxy_scores) {
  if (reference_scores.size() < 8) {
    throw InvalidArgument("top_quartile_rho: need at least 8 models, got " +
                          std::to_string(reference_scores.size()));
  }
  std::vector<double> ref, prox;
  for (const auto& id : top_quartile_models(reference_scores)) {
    auto it = proxy_scores.find(id);
    if (it == proxy_scores.end()) throw InvalidArgument("top_quartile_rho: no proxy score for '" + id + "'");
    ref.push_back(reference_scores.at(id));
    prox.push_back(it->second);
  }
  return spearman_rho(ref, prox);
}

double capability_recovery(double proxy_avg, double reference_avg) {
  if (!(reference_avg > 0.0)) throw InvalidArgument("capability_recovery: reference average must be positive");
  return proxy_avg / reference_avg;
}

// ---------------------------------------------------------------------------
// ScoreTable

void ScoreTable::validate() const {
  if (rows.empty()) throw InvalidArgument("score table is empty");
  const auto& first = rows.begin()->second;
  for (const auto& [model, scores] : rows) {
    if (scores.size() != first.size()) {
      throw InvalidArgument("score table is not rectangular at model '" + model + "'");
    }
    for (const auto& [bench, score] : scores) {
      if (!first.count(bench)) {
        throw InvalidArgument("score table is not rectangular: '" + model + "' has extra benchmark '" +
                              bench + "'");
      }
      if (!std::isfinite(score)) throw InvalidArgument("non-finite score for " + model + "/" + bench);
      if (!domain_of.count(bench)) throw InvalidArgument("missing domain mapping for benchmark '" + bench + "'");
    }
  }
}

std::vector<std::string> ScoreTable::models() const {
  std::vector<std::string> out;
  for (const auto& [model, scores] : rows) out.push_back(model);
  return out;
}

std::vector<std::string> ScoreTable::benchmarks() const {
  std::vector<std::string> out;
  if (!rows.empty()) {
    for (const auto& [bench, score] : rows.begin()->second) out.push_back(bench);
  }
  return out;
}

std::vector<std::string> ScoreTable::domains() const {
  std::set<std::string> seen;
  for (const auto& bench : benchmarks()) {
    auto it = domain_of.find(bench);
    if (it == domain_of.end()) throw InvalidArgument("missing domain mapping for benchmark '" + bench + "'");
    seen.insert(it->second);
  }
  return {seen.begin(), seen.end()};
}

double ScoreTable::domain_average(const std::string& model, const std::string& domain) const {
  auto row = rows.find(model);
  if (row == rows.end()) throw InvalidArgument("unknown model '" + model + "'");
  double sum = 0.0;
  int count = 0;
  for (const auto& [bench, score] : row->second) {
    auto it = domain_of.find(bench);
    if (it == domain_of.end()) throw InvalidArgument("missing domain mapping for benchmark '" + bench + "'");
    if (it->second != domain) continue;
    sum += score;
    ++count;
  }
  if (count == 0) throw InvalidArgument("domain '" + domain + "' has no benchmarks");
  return sum / count;
}

double ScoreTable::average(const std::string& model) const {
  auto row = rows.find(model);
  if (row == rows.end()) throw InvalidArgument("unknown model '" + model + "'");
  double sum = 0.0;
  for (const auto& [bench, score] : row->second) sum += score;
  return sum / static_cast<double>(row->second.size());
}

ModelScores ScoreTable::domain_scores(const std::string& domain) const {
  ModelScores out;
  for (const auto& [model, scores] : rows) out[model] = domain_average(model, domain);
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    fields.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
  }
  return fields;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                               std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != columns) {
      throw InvalidArgument(path.string() + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(columns) + " columns");
    }
    if (header) {
      header = false;
      continue;
    }
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::string format_score(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

ScoreTable load_score_csv(const std::filesystem::path& scores, const std::filesystem::path& domains) {
  ScoreTable table;
  for (const auto& row : read_csv(domains, 2)) table.domain_of[row[0]] = row[1];
  for (const auto& row : read_csv(scores, 3)) {
    double value;
    try {
      std::size_t used = 0;
      value = std::stod(row[2], &used);
      if (used != row[2].size()) throw std::invalid_argument(row[2]);
    } catch (const std::exception&) {
      throw InvalidArgument("bad score '" + row[2] + "' in " + scores.string());
    }
    if (!table.rows[row[0]].emplace(row[1], value).second) {
      throw InvalidArgument("duplicate score for " + row[0] + "/" + row[1]);
    }
  }
  table.validate();
  return table;
}

std::string score_csv_text(const ScoreTable& table) {
  std::ostringstream os;
  os << "model_id,benchmark_id,score\n";
  for (const auto& [model, scores] : table.rows) {
    for (const auto& [bench, score] : scores) os << model << ',' << bench << ',' << format_score(score) << '\n';
  }
  return os.str();
}

void save_score_csv(const ScoreTable& table, const std::filesystem::path& scores) {
  std::ofstream out(scores, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + scores.string() + "'");
  out << score_csv_text(table);
}

void save_domain_csv(const ScoreTable& table, const std::filesystem::path& domains) {
  std::ofstream out(domains, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + domains.string() + "'");
  out << "benchmark_id,domain_id\n";
  for (const auto& [bench, domain] : table.domain_of) out << bench << ',' << domain << '\n';
}

// ---------------------------------------------------------------------------
// Ranks

RankResult macro_average_rank(const ScoreTable& table, const std::string& target) {
  if (!table.rows.count(target)) throw InvalidArgument("unknown model '" + target + "'");
  if (table.rows.size() < 2) throw InvalidArgument("macro_average_rank: need at least 2 models");
  const auto models = table.models();
  const auto target_index =
      static_cast<std::size_t>(std::find(models.begin(), models.end(), target) - models.begin());
  RankResult result;
  const auto domains = table.domains();
  for (const auto& domain : domains) {
    std::vector<double> negated;
    for (const auto& m : models) negated.push_back(-table.domain_average(m, domain));
    result.per_domain[domain] = average_ranks(negated)[target_index];
  }
  double sum = 0.0;
  for (const auto& [domain, r] : result.per_domain) sum += r;
  result.macro = sum / static_cast<double>(result.per_domain.size());
  return result;
}

RankResult rank_against(const ScoreTable& population, const std::map<std::string, double>& scores) {
  ScoreTable combined = population;
  std::string id = "__candidate__";
  while (combined.rows.count(id)) id += '_';
  combined.rows[id] = scores;
  combined.validate();
  return macro_average_rank(combined, id);
}

CorrelationReport consistency_report(const ScoreTable& reference, const ScoreTable& proxy) {
  reference.validate();
  proxy.validate();
  if (reference.models() != proxy.models() || reference.benchmarks() != proxy.benchmarks()) {
    throw InvalidArgument("consistency_report: tables differ in models or benchmarks");
  }
  CorrelationReport report;
  const auto domains = reference.domains();
  const bool quartile_possible = reference.rows.size() >= 8;
  double rho_sum = 0.0, top_sum = 0.0;
  bool top_complete = quartile_possible;
  for (const auto& domain : domains) {
    const auto ref = reference.domain_scores(domain);
    const auto prox = proxy.domain_scores(domain);
    std::vector<double> rv, pv;
    for (const auto& [m, v] : ref) {
      rv.push_back(v);
      pv.push_back(prox.at(m));
    }
    const double rho = spearman_rho(rv, pv);
    report.per_domain_rho[domain] = rho;
    rho_sum += rho;
    std::optional<double> top;
    if (quartile_possible) {
      try {
        top = top_quartile_rho(ref, prox);
        top_sum += *top;
      } catch (const DegenerateError&) {
        top_complete = false;
      }
    }
    report.top_quartile_rho[domain] = top;
  }
  report.macro_avg_rho = rho_sum / static_cast<double>(domains.size());
  if (top_complete) report.top_quartile_macro = top_sum / static_cast<double>(domains.size());

  double recovery = 0.0;
  for (const auto& model : reference.models()) {
    recovery += capability_recovery(proxy.average(model), reference.average(model));
  }
  report.capability_recovery = recovery / static_cast<double>(reference.rows.size());
  return report;
}

}  // namespace demix
