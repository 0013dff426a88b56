#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace demix {

using Shape = std::vector<std::size_t>;
using Metadata = std::map<std::string, std::string>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> values;
};

// Named flat f64 tensors. Names iterate in lexicographic order; every value is
// finite and every tensor's length matches its shape. Once built, a set is
// only read, so it can be shared across threads.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  ParameterSet() = default;

  // Throws SchemaError on duplicate name or shape/length mismatch and
  // NonFiniteError on NaN/Inf.
  void insert(const std::string& name, Shape shape, std::vector<double> values);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  std::size_t num_values() const;

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }

  Metadata& metadata() { return metadata_; }
  const Metadata& metadata() const { return metadata_; }

 private:
  Map tensors_;
  Metadata metadata_;
};

// Bitwise equality of names, shapes and values (metadata ignored).
bool bit_equal(const ParameterSet& a, const ParameterSet& b);

// Throws SchemaError unless both sets have identical names and shapes.
void require_same_schema(const ParameterSet& a, const ParameterSet& b, const char* context);

// SHA-256 hex digest over names, shapes and little-endian values. Used as the
// identity of a base model and as the archive checksum.
std::string fingerprint(const ParameterSet& params);

// SHA-256 hex digest of one tensor's little-endian f64 payload bytes.
std::string tensor_checksum(const Tensor& tensor);

struct WeightDelta {
  ParameterSet entries;
  std::string base_id;
};

WeightDelta compute_delta(const ParameterSet& trained, const ParameterSet& base);
ParameterSet apply_delta(const ParameterSet& base, const WeightDelta& delta);

// Small-update ratio: sum|trained - base| / (sum|trained| + sum|base|) taken
// jointly over all tensors.
double delta_magnitude(const ParameterSet& trained, const ParameterSet& base);

// ---------------------------------------------------------------------------
// Archive format (version 1)
//
//   bytes 0..3    magic "DMXT"
//   bytes 4..7    u32 format version, little endian
//   bytes 8..15   u64 header length H, little endian
//   next H bytes  UTF-8 JSON header:
//                   {"format_version":1,
//                    "metadata":{...string->string...},
//                    "tensors":[{"name":..,"shape":[..],"offset":..,"length":..},..]}
//                 offsets are relative to the payload start, in bytes; tensors
//                 are listed in lexicographic name order
//   payload       little-endian f64 values, tensors back to back
// ---------------------------------------------------------------------------

inline constexpr char kArchiveMagic[4] = {'D', 'M', 'X', 'T'};
inline constexpr std::uint32_t kArchiveVersion = 1;

struct TensorIndexEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct ArchiveHeader {
  std::uint32_t format_version = kArchiveVersion;
  std::vector<TensorIndexEntry> tensors;
  Metadata metadata;
  std::uint64_t payload_start = 0;  // absolute file offset of the payload
};

void save_archive(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_archive(const std::filesystem::path& path);

// Parses and validates only the header; cheap on large archives.
ArchiveHeader read_archive_header(const std::filesystem::path& path);

// Reads a single tensor by offset without loading the rest of the payload.
Tensor read_tensor(const std::filesystem::path& path, const std::string& name);

// Encoded archive bytes; save_archive writes exactly these.
std::vector<std::uint8_t> encode_archive(const ParameterSet& params);
ParameterSet decode_archive(std::span<const std::uint8_t> bytes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace demix
