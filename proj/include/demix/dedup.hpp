#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace demix {

inline constexpr std::size_t kShingleSize = 24;
inline constexpr std::size_t kBands = 20;
inline constexpr std::size_t kRowsPerBand = 13;
inline constexpr std::size_t kNumHashes = kBands * kRowsPerBand;  // 260
inline constexpr std::uint64_t kMersenne61 = (std::uint64_t{1} << 61) - 1;

// Splits on ASCII and Unicode whitespace, lowercases ASCII letters and drops
// tokens made only of ASCII punctuation.
std::vector<std::string> tokenize(std::string_view text);

struct ShingleSet {
  std::string doc_id;
  std::vector<std::uint64_t> shingles;  // sorted, unique
};

// Hashed word n-grams. Documents shorter than n tokens give one shingle over
// all their tokens. Throws InvalidArgument when no tokens remain.
ShingleSet shingle(std::string_view text, std::size_t n = kShingleSize, std::string doc_id = {});

// 64-bit hash of a token sequence joined by single spaces.
std::uint64_t shingle_hash(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end);

// h_k(x) = (a_k * x + b_k) mod (2^61 - 1), with (a_k, b_k) drawn from seed.
class HashFamily {
 public:
  explicit HashFamily(std::uint64_t seed, std::size_t count = kNumHashes);

  std::size_t size() const { return a_.size(); }
  std::uint64_t operator()(std::size_t k, std::uint64_t x) const;

 private:
  std::vector<std::uint64_t> a_;
  std::vector<std::uint64_t> b_;
};

struct MinHashSignature {
  std::string doc_id;
  std::vector<std::uint64_t> values;  // bands * rows entries
};

// Throws InvalidArgument on an empty shingle set.
MinHashSignature minhash(const ShingleSet& shingles, const HashFamily& family);
MinHashSignature minhash(const ShingleSet& shingles, std::uint64_t seed);

// One signature per set; the OpenMP version splits the documents across
// threads and gives the same output.
std::vector<MinHashSignature> minhash_all(const std::vector<ShingleSet>& sets, std::uint64_t seed);
std::vector<MinHashSignature> minhash_all_serial(const std::vector<ShingleSet>& sets, std::uint64_t seed);

// Fraction of coordinates on which two signatures agree.
double signature_agreement(const MinHashSignature& a, const MinHashSignature& b);
// Exact Jaccard similarity of two sorted unique shingle lists.
double jaccard(const ShingleSet& a, const ShingleSet& b);

struct LshLayout {
  std::size_t bands = kBands;
  std::size_t rows = kRowsPerBand;
};

// Index pairs (i < j) whose signatures agree exactly on every row of at least
// one band, sorted. Throws SchemaError when a signature does not have
// bands * rows values.
std::vector<std::pair<std::size_t, std::size_t>> lsh_candidate_pairs(
    const std::vector<MinHashSignature>& signatures, const LshLayout& layout = {});

// Same pairs by doc id, ordered (earlier, later) by input position.
std::set<std::pair<std::string, std::string>> lsh_candidates(
    const std::vector<MinHashSignature>& signatures, const LshLayout& layout = {});

// Probability that a pair at Jaccard j becomes a candidate: 1 - (1 - j^r)^b.
double lsh_pair_probability(double j, const LshLayout& layout = {});

struct Document {
  std::string id;
  std::string text;
};

enum class DedupMode { kExact, kFuzzy, kBoth };

std::string to_string(DedupMode mode);
DedupMode parse_dedup_mode(const std::string& name);

struct DedupResult {
  std::vector<std::string> kept;     // input order
  std::vector<std::string> removed;  // input order
  // id -> "exact duplicate of X" / "near duplicate of X"
  std::map<std::string, std::string> reasons;
  // Groups of two or more documents, representative (earliest) first.
  std::vector<std::vector<std::string>> clusters;
};

// Exact mode drops byte-identical texts; fuzzy mode links LSH candidate
// pairs with union-find; both runs exact first and fuzzy on the survivors.
// Every cluster keeps its earliest document. Documents without tokens get a
// fixed empty-document shingle. Throws InvalidArgument on duplicate ids.
DedupResult dedup_corpus(const std::vector<Document>& docs, DedupMode mode, std::uint64_t seed,
                         std::size_t n = kShingleSize);

// Line-delimited JSON records with string fields "id" and "text".
std::vector<Document> load_documents_jsonl(const std::filesystem::path& path);
std::string dedup_report_json(const DedupResult& result, DedupMode mode, std::uint64_t seed);

}  // namespace demix
