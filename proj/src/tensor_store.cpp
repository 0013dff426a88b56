#include "demix/tensor_store.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "demix/errors.hpp"
#include "demix/kernels.hpp"

namespace demix {

namespace {

using json = nlohmann::json;

constexpr std::size_t kPreambleSize = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f64s(std::vector<std::uint8_t>& out, std::span<const double> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 8);
  std::uint8_t* p = out.data() + start;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(p, values.data(), values.size() * 8);
  } else {
    for (double v : values) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) *p++ = static_cast<std::uint8_t>(bits >> (8 * i));
    }
  }
}

std::vector<double> get_f64s(const std::uint8_t* p, std::size_t count) {
  std::vector<double> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), p, count * 8);
  } else {
    for (std::size_t k = 0; k < count; ++k) values[k] = std::bit_cast<double>(get_le(p + 8 * k, 8));
  }
  return values;
}

struct DigestDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error("sha256: digest init failed");
    }
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[md[i] >> 4]);
      out.push_back(kHex[md[i] & 0xf]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

ArchiveHeader parse_header(std::span<const std::uint8_t> preamble_and_header,
                           std::uint64_t file_size) {
  if (preamble_and_header.size() < kPreambleSize) throw FormatError("truncated header");
  if (std::memcmp(preamble_and_header.data(), kArchiveMagic, 4) != 0) {
    throw FormatError("corrupt header: bad magic");
  }
  ArchiveHeader header;
  header.format_version = static_cast<std::uint32_t>(get_le(preamble_and_header.data() + 4, 4));
  if (header.format_version != kArchiveVersion) {
    throw FormatError("unsupported format version " + std::to_string(header.format_version));
  }
  const std::uint64_t header_len = get_le(preamble_and_header.data() + 8, 8);
  if (header_len > file_size - kPreambleSize ||
      preamble_and_header.size() < kPreambleSize + header_len) {
    throw FormatError("corrupt header: header length exceeds file size");
  }
  header.payload_start = kPreambleSize + header_len;
  const std::uint64_t payload_size = file_size - header.payload_start;

  json doc;
  try {
    const auto* text = reinterpret_cast<const char*>(preamble_and_header.data() + kPreambleSize);
    doc = json::parse(text, text + header_len);
    if (doc.at("format_version").get<std::uint32_t>() != header.format_version) {
      throw FormatError("corrupt header: version fields disagree");
    }
    for (const auto& [key, value] : doc.at("metadata").items()) {
      header.metadata[key] = value.get<std::string>();
    }
    for (const auto& t : doc.at("tensors")) {
      TensorIndexEntry entry;
      entry.name = t.at("name").get<std::string>();
      entry.shape = t.at("shape").get<Shape>();
      entry.offset = t.at("offset").get<std::uint64_t>();
      entry.length = t.at("length").get<std::uint64_t>();
      header.tensors.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt header: ") + e.what());
  }

  std::uint64_t cursor = 0;
  const std::string* previous = nullptr;
  for (const auto& entry : header.tensors) {
    if (previous && !(*previous < entry.name)) {
      throw FormatError("corrupt header: tensor names not strictly ascending at '" + entry.name + "'");
    }
    previous = &entry.name;
    if (entry.length != shape_numel(entry.shape) * 8) {
      throw FormatError("shape/length mismatch for tensor '" + entry.name + "': shape " +
                        shape_string(entry.shape) + " with " + std::to_string(entry.length / 8) +
                        " values");
    }
    if (entry.offset < cursor) throw FormatError("corrupt header: overlapping tensor offsets");
    cursor = entry.offset + entry.length;
    if (cursor > payload_size) {
      throw FormatError("truncated payload: tensor '" + entry.name + "' ends at byte " +
                        std::to_string(cursor) + " of " + std::to_string(payload_size));
    }
  }
  return header;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
  return bytes;
}

ArchiveHeader read_header_from_stream(std::ifstream& in, const std::filesystem::path& path) {
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> buf(kPreambleSize);
  if (file_size < kPreambleSize || !in.read(reinterpret_cast<char*>(buf.data()), kPreambleSize)) {
    throw FormatError("truncated header in '" + path.string() + "'");
  }
  const std::uint64_t header_len = get_le(buf.data() + 8, 8);
  if (std::memcmp(buf.data(), kArchiveMagic, 4) == 0 && header_len <= file_size - kPreambleSize) {
    buf.resize(kPreambleSize + header_len);
    in.read(reinterpret_cast<char*>(buf.data() + kPreambleSize),
            static_cast<std::streamsize>(header_len));
  }
  return parse_header(buf, file_size);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void ParameterSet::insert(const std::string& name, Shape shape, std::vector<double> values) {
  if (tensors_.count(name)) throw SchemaError("duplicate tensor name '" + name + "'");
  if (shape_numel(shape) != values.size()) {
    throw SchemaError("shape/length mismatch for tensor '" + name + "': shape " +
                      shape_string(shape) + " with " + std::to_string(values.size()) + " values");
  }
  if (!kernels::all_finite(values)) throw NonFiniteError("non-finite value in tensor '" + name + "'");
  tensors_.emplace(name, Tensor{std::move(shape), std::move(values)});
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw SchemaError("no tensor named '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::num_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.values.size();
  return n;
}

bool bit_equal(const ParameterSet& a, const ParameterSet& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    const auto& va = ia->second.values;
    const auto& vb = ib->second.values;
    if (va.size() != vb.size()) return false;
    if (!va.empty() && std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

void require_same_schema(const ParameterSet& a, const ParameterSet& b, const char* context) {
  if (a.size() != b.size()) {
    throw SchemaError(std::string(context) + ": tensor count differs (" + std::to_string(a.size()) +
                      " vs " + std::to_string(b.size()) + ")");
  }
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first) {
      throw SchemaError(std::string(context) + ": tensor name mismatch '" + ia->first + "' vs '" +
                        ib->first + "'");
    }
    if (ia->second.shape != ib->second.shape) {
      throw SchemaError(std::string(context) + ": shape mismatch for '" + ia->first + "' " +
                        shape_string(ia->second.shape) + " vs " + shape_string(ib->second.shape));
    }
  }
}

std::string fingerprint(const ParameterSet& params) {
  Sha256 sha;
  std::vector<std::uint8_t> scratch;
  for (const auto& [name, t] : params) {
    scratch.clear();
    put_u64(scratch, name.size());
    scratch.insert(scratch.end(), name.begin(), name.end());
    put_u64(scratch, t.shape.size());
    for (std::size_t d : t.shape) put_u64(scratch, d);
    put_f64s(scratch, t.values);
    sha.update(scratch.data(), scratch.size());
  }
  return sha.hex();
}

std::string tensor_checksum(const Tensor& tensor) {
  std::vector<std::uint8_t> bytes;
  put_f64s(bytes, tensor.values);
  return sha256_hex(bytes);
}

WeightDelta compute_delta(const ParameterSet& trained, const ParameterSet& base) {
  require_same_schema(trained, base, "compute_delta");
  WeightDelta delta;
  delta.base_id = fingerprint(base);
  for (const auto& [name, t] : trained) {
    std::vector<double> out(t.values.size());
    kernels::subtract(t.values, base.at(name).values, out);
    delta.entries.insert(name, t.shape, std::move(out));
  }
  return delta;
}

ParameterSet apply_delta(const ParameterSet& base, const WeightDelta& delta) {
  require_same_schema(base, delta.entries, "apply_delta");
  if (delta.base_id != fingerprint(base)) {
    throw SchemaError("apply_delta: delta was computed against base " + delta.base_id.substr(0, 12) +
                      ", not this base");
  }
  ParameterSet out;
  out.metadata() = base.metadata();
  for (const auto& [name, t] : base) {
    std::vector<double> values(t.values.size());
    kernels::add(t.values, delta.entries.at(name).values, values);
    out.insert(name, t.shape, std::move(values));
  }
  return out;
}

double delta_magnitude(const ParameterSet& trained, const ParameterSet& base) {
  require_same_schema(trained, base, "delta_magnitude");
  double moved = 0.0;
  double denom = 0.0;
  for (const auto& [name, t] : trained) {
    const auto& b = base.at(name).values;
    moved += kernels::sum_abs_diff(t.values, b);
    denom += kernels::sum_abs(t.values) + kernels::sum_abs(b);
  }
  if (denom == 0.0) throw DegenerateError("degenerate δ: both models are all zero");
  return moved / denom;
}

std::vector<std::uint8_t> encode_archive(const ParameterSet& params) {
  json header;
  header["format_version"] = kArchiveVersion;
  header["metadata"] = json::object();
  for (const auto& [key, value] : params.metadata()) header["metadata"][key] = value;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    if (!kernels::all_finite(t.values)) {
      throw NonFiniteError("non-finite value in tensor '" + name + "'");
    }
    const std::uint64_t length = t.values.size() * 8;
    header["tensors"].push_back(
        {{"name", name}, {"shape", t.shape}, {"offset", offset}, {"length", length}});
    offset += length;
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + text.size() + offset);
  out.insert(out.end(), kArchiveMagic, kArchiveMagic + 4);
  put_u32(out, kArchiveVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : params) put_f64s(out, t.values);
  return out;
}

ParameterSet decode_archive(std::span<const std::uint8_t> bytes) {
  const ArchiveHeader header = parse_header(bytes, bytes.size());
  ParameterSet params;
  params.metadata() = header.metadata;
  for (const auto& entry : header.tensors) {
    auto values = get_f64s(bytes.data() + header.payload_start + entry.offset, entry.length / 8);
    if (!kernels::all_finite(values)) {
      throw NonFiniteError("non-finite value in tensor '" + entry.name + "'");
    }
    params.insert(entry.name, entry.shape, std::move(values));
  }
  return params;
}

void save_archive(const ParameterSet& params, const std::filesystem::path& path) {
  const auto bytes = encode_archive(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed on '" + path.string() + "'");
}

ParameterSet load_archive(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_archive(bytes);
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " (" + path.string() + ")");
  }
}

ArchiveHeader read_archive_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return read_header_from_stream(in, path);
}

Tensor read_tensor(const std::filesystem::path& path, const std::string& name) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  const ArchiveHeader header = read_header_from_stream(in, path);
  auto it = std::find_if(header.tensors.begin(), header.tensors.end(),
                         [&](const TensorIndexEntry& e) { return e.name == name; });
  if (it == header.tensors.end()) throw SchemaError("no tensor named '" + name + "'");
  std::vector<std::uint8_t> buf(it->length);
  in.seekg(static_cast<std::streamoff>(header.payload_start + it->offset));
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw FormatError("truncated payload reading '" + name + "'");
  }
  Tensor t{it->shape, get_f64s(buf.data(), it->length / 8)};
  if (!kernels::all_finite(t.values)) throw NonFiniteError("non-finite value in tensor '" + name + "'");
  return t;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 sha;
  sha.update(bytes.data(), bytes.size());
  return sha.hex();
}

std::string sha256_hex(const std::string& text) {
  Sha256 sha;
  sha.update(text.data(), text.size());
  return sha.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

}  // namespace demix
