#include "demix/dedup.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "demix/errors.hpp"
#include "demix/random.hpp"

namespace demix {

namespace {

// Length of the whitespace sequence starting at s[i], 0 if none.
std::size_t whitespace_at(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c == ' ' || (c >= 0x09 && c <= 0x0d) || (c >= 0x1c && c <= 0x1f)) return 1;
  auto byte = [&](std::size_t k) -> int {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : -1;
  };
  if (c == 0xc2 && (byte(1) == 0x85 || byte(1) == 0xa0)) return 2;
  if (c == 0xe1 && byte(1) == 0x9a && byte(2) == 0x80) return 3;
  if (c == 0xe2 && byte(1) == 0x80) {
    const int t = byte(2);
    if ((t >= 0x80 && t <= 0x8a) || t == 0xa8 || t == 0xa9 || t == 0xaf) return 3;
  }
  if (c == 0xe2 && byte(1) == 0x81 && byte(2) == 0x9f) return 3;
  if (c == 0xe3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;
  return 0;
}

bool punctuation_only(const std::string& token) {
  return std::all_of(token.begin(), token.end(), [](char ch) {
    const auto c = static_cast<unsigned char>(ch);
    return c < 0x80 && std::ispunct(c);
  });
}

std::uint64_t mulmod61(std::uint64_t a, std::uint64_t x, std::uint64_t b) {
  __uint128_t v = static_cast<__uint128_t>(a) * x + b;
  std::uint64_t r = static_cast<std::uint64_t>(v & kMersenne61) + static_cast<std::uint64_t>(v >> 61);
  r = (r & kMersenne61) + (r >> 61);
  return r >= kMersenne61 ? r - kMersenne61 : r;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty() && !punctuation_only(current)) tokens.push_back(current);
    current.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    if (const std::size_t w = whitespace_at(text, i)) {
      flush();
      i += w;
      continue;
    }
    const auto c = static_cast<unsigned char>(text[i]);
    current.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c + 32) : static_cast<char>(c));
    ++i;
  }
  flush();
  return tokens;
}

std::uint64_t shingle_hash(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t t = begin; t < end; ++t) {
    if (t > begin) {
      h ^= ' ';
      h *= 0x100000001b3ULL;
    }
    for (unsigned char c : tokens[t]) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return splitmix64(h);
}

ShingleSet shingle(std::string_view text, std::size_t n, std::string doc_id) {
  if (n == 0) throw InvalidArgument("shingle: n must be positive");
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw InvalidArgument("shingle: empty document" + (doc_id.empty() ? "" : " '" + doc_id + "'"));
  ShingleSet set;
  set.doc_id = std::move(doc_id);
  if (tokens.size() < n) {
    set.shingles.push_back(shingle_hash(tokens, 0, tokens.size()));
    return set;
  }
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) set.shingles.push_back(shingle_hash(tokens, i, i + n));
  std::sort(set.shingles.begin(), set.shingles.end());
  set.shingles.erase(std::unique(set.shingles.begin(), set.shingles.end()), set.shingles.end());
  return set;
}

HashFamily::HashFamily(std::uint64_t seed, std::size_t count) {
  Rng rng(derive_seed(seed, fnv1a64("minhash")));
  a_.resize(count);
  b_.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    a_[k] = 1 + rng.below(kMersenne61 - 1);
    b_[k] = rng.below(kMersenne61);
  }
}

std::uint64_t HashFamily::operator()(std::size_t k, std::uint64_t x) const {
  return mulmod61(a_[k], x % kMersenne61, b_[k]);
}

MinHashSignature minhash(const ShingleSet& shingles, const HashFamily& family) {
  if (shingles.shingles.empty()) throw InvalidArgument("minhash: empty shingle set '" + shingles.doc_id + "'");
  MinHashSignature sig;
  sig.doc_id = shingles.doc_id;
  sig.values.assign(family.size(), ~std::uint64_t{0});
  for (std::uint64_t s : shingles.shingles) {
    const std::uint64_t x = s % kMersenne61;
    for (std::size_t k = 0; k < family.size(); ++k) sig.values[k] = std::min(sig.values[k], family(k, x));
  }
  return sig;
}

MinHashSignature minhash(const ShingleSet& shingles, std::uint64_t seed) {
  return minhash(shingles, HashFamily(seed));
}

std::vector<MinHashSignature> minhash_all(const std::vector<ShingleSet>& sets, std::uint64_t seed) {
  const HashFamily family(seed);
  std::vector<MinHashSignature> out(sets.size());
  std::vector<std::exception_ptr> errors(sets.size());
  const auto n = static_cast<std::ptrdiff_t>(sets.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      out[k] = minhash(sets[k], family);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

std::vector<MinHashSignature> minhash_all_serial(const std::vector<ShingleSet>& sets, std::uint64_t seed) {
  const HashFamily family(seed);
  std::vector<MinHashSignature> out;
  out.reserve(sets.size());
  for (const auto& s : sets) out.push_back(minhash(s, family));
  return out;
}

double signature_agreement(const MinHashSignature& a, const MinHashSignature& b) {
  if (a.values.size() != b.values.size() || a.values.empty()) {
    throw SchemaError("signature_agreement: signatures differ in length");
  }
  std::size_t same = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) same += a.values[k] == b.values[k];
  return static_cast<double>(same) / static_cast<double>(a.values.size());
}

double jaccard(const ShingleSet& a, const ShingleSet& b) {
  std::vector<std::uint64_t> common;
  std::set_intersection(a.shingles.begin(), a.shingles.end(), b.shingles.begin(), b.shingles.end(),
                        std::back_inserter(common));
  const std::size_t uni = a.shingles.size() + b.shingles.size() - common.size();
  if (uni == 0) throw InvalidArgument("jaccard: both sets are empty");
  return static_cast<double>(common.size()) / static_cast<double>(uni);
}

namespace {

// Runs of documents whose values agree on one band, per band.
template <typename Visit>
void for_each_band_group(const std::vector<MinHashSignature>& sigs, const LshLayout& layout, Visit visit) {
  if (layout.bands == 0 || layout.rows == 0) throw InvalidArgument("lsh: empty band layout");
  const std::size_t width = layout.bands * layout.rows;
  for (const auto& s : sigs) {
    if (s.values.size() != width) {
      throw SchemaError("lsh: signature '" + s.doc_id + "' has " + std::to_string(s.values.size()) +
                        " values, layout needs " + std::to_string(width));
    }
  }
  std::vector<std::vector<std::vector<std::size_t>>> groups(layout.bands);
  const auto bands = static_cast<std::ptrdiff_t>(layout.bands);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t bi = 0; bi < bands; ++bi) {
    const auto off = static_cast<std::size_t>(bi) * layout.rows;
    auto less = [&](std::size_t x, std::size_t y) {
      const auto* px = sigs[x].values.data() + off;
      const auto* py = sigs[y].values.data() + off;
      return std::lexicographical_compare(px, px + layout.rows, py, py + layout.rows);
    };
    std::vector<std::size_t> order(sigs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), less);
    auto& out = groups[static_cast<std::size_t>(bi)];
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i + 1;
      while (j < order.size() && !less(order[i], order[j])) ++j;
      if (j - i > 1) out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                                      order.begin() + static_cast<std::ptrdiff_t>(j));
      i = j;
    }
  }
  // Merged in band order so the visit sequence does not depend on threads.
  for (const auto& band : groups) {
    for (const auto& g : band) visit(g);
  }
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> lsh_candidate_pairs(
    const std::vector<MinHashSignature>& signatures, const LshLayout& layout) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for_each_band_group(signatures, layout, [&](const std::vector<std::size_t>& g) {
    // stable_sort leaves each group in input order
    for (std::size_t a = 0; a < g.size(); ++a) {
      for (std::size_t b = a + 1; b < g.size(); ++b) pairs.emplace_back(g[a], g[b]);
    }
  });
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  return pairs;
}

std::set<std::pair<std::string, std::string>> lsh_candidates(const std::vector<MinHashSignature>& signatures,
                                                             const LshLayout& layout) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& [i, j] : lsh_candidate_pairs(signatures, layout)) {
    out.emplace(signatures[i].doc_id, signatures[j].doc_id);
  }
  return out;
}

double lsh_pair_probability(double j, const LshLayout& layout) {
  return 1.0 - std::pow(1.0 - std::pow(j, static_cast<double>(layout.rows)), static_cast<double>(layout.bands));
}

std::string to_string(DedupMode mode) {
  switch (mode) {
    case DedupMode::kExact: return "exact";
    case DedupMode::kFuzzy: return "fuzzy";
    case DedupMode::kBoth: return "both";
  }
  return "unknown";
}

DedupMode parse_dedup_mode(const std::string& name) {
  for (auto m : {DedupMode::kExact, DedupMode::kFuzzy, DedupMode::kBoth}) {
    if (to_string(m) == name) return m;
  }
  throw InvalidArgument("unknown dedup mode '" + name + "' (expected exact, fuzzy or both)");
}

namespace {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  // The smaller index becomes the root, so roots are the earliest members.
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace

DedupResult dedup_corpus(const std::vector<Document>& docs, DedupMode mode, std::uint64_t seed, std::size_t n) {
  {
    std::set<std::string_view> ids;
    for (const auto& d : docs) {
      if (!ids.insert(d.id).second) throw InvalidArgument("dedup: duplicate document id '" + d.id + "'");
    }
  }
  UnionFind uf(docs.size());
  std::vector<char> exact_dup(docs.size(), 0);

  if (mode != DedupMode::kFuzzy) {
    std::unordered_map<std::string_view, std::size_t> first;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      auto [it, fresh] = first.emplace(docs[i].text, i);
      if (!fresh) {
        uf.unite(it->second, i);
        exact_dup[i] = 1;
      }
    }
  }

  if (mode != DedupMode::kExact) {
    std::vector<std::size_t> members;
    std::vector<ShingleSet> sets;
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (exact_dup[i]) continue;
      members.push_back(i);
      if (tokenize(docs[i].text).empty()) {
        ShingleSet empty;
        empty.doc_id = docs[i].id;
        empty.shingles.push_back(shingle_hash({}, 0, 0));
        sets.push_back(std::move(empty));
      } else {
        sets.push_back(shingle(docs[i].text, n, docs[i].id));
      }
    }
    const auto sigs = minhash_all(sets, seed);
    for (const auto& [a, b] : lsh_candidate_pairs(sigs)) uf.unite(members[a], members[b]);
  }

  DedupResult result;
  std::map<std::size_t, std::vector<std::size_t>> components;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const std::size_t root = uf.find(i);
    components[root].push_back(i);
    if (root == i) {
      result.kept.push_back(docs[i].id);
    } else {
      result.removed.push_back(docs[i].id);
      result.reasons[docs[i].id] =
          (exact_dup[i] ? "exact duplicate of " : "near duplicate of ") + docs[root].id;
    }
  }
  for (const auto& [root, idx] : components) {
    if (idx.size() < 2) continue;
    std::vector<std::string> cluster;
    for (std::size_t i : idx) cluster.push_back(docs[i].id);
    result.clusters.push_back(std::move(cluster));
  }
  return result;
}

std::vector<Document> load_documents_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      docs.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read error on '" + path.string() + "'");
  return docs;
}

std::string dedup_report_json(const DedupResult& result, DedupMode mode, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j["seed"] = seed;
  j["shingle_size"] = kShingleSize;
  j["bands"] = kBands;
  j["rows_per_band"] = kRowsPerBand;
  j["kept_count"] = result.kept.size();
  j["removed_count"] = result.removed.size();
  j["kept"] = result.kept;
  nlohmann::ordered_json removed = nlohmann::ordered_json::array();
  for (const auto& id : result.removed) removed.push_back({{"id", id}, {"reason", result.reasons.at(id)}});
  j["removed"] = removed;
  j["clusters"] = result.clusters;
  return j.dump(2) + "\n";
}

}  // namespace demix
