// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "saobp/io.hpp"

namespace saobp::io {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

template <typename T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& offset) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  if (offset + sizeof(T) > in.size()) throw ValidationError("tensor file truncated");
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<U>(in[offset + b]) << (8 * b);
  offset += sizeof(T);
  return std::bit_cast<T>(bits);
}

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  return tmp;
}

void write_bytes_atomic(const std::filesystem::path& path, const char* data, std::size_t size) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(data, static_cast<std::streamsize>(size));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::size_t Tensor::element_count() const {
  std::size_t count = 1;
  for (const auto d : shape) count *= d;
  return count;
}

void Tensor::validate() const {
  if (shape.empty()) throw ValidationError("tensor: rank must be at least 1");
  if (element_count() != data.size()) {
    throw ValidationError("tensor: shape holds " + std::to_string(element_count()) +
                          " elements but data has " + std::to_string(data.size()));
  }
}

std::vector<std::uint8_t> encode_binary(const Tensor& t) {
  t.validate();
  std::vector<std::uint8_t> out;
  out.reserve(12 + 4 * t.shape.size() + 8 * t.data.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_le<std::uint16_t>(out, kFormatVersion);
  put_le<std::uint16_t>(out, kDtypeFloat64);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (const auto d : t.shape) put_le<std::uint32_t>(out, d);
  for (const double v : t.data) put_le<double>(out, v);
  return out;
}

Tensor decode_binary(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ValidationError("tensor file: bad magic");
  }
  std::size_t offset = 4;
  const auto version = get_le<std::uint16_t>(bytes, offset);
  if (version != kFormatVersion) {
    throw ValidationError("tensor file: unsupported version " + std::to_string(version));
  }
  const auto dtype = get_le<std::uint16_t>(bytes, offset);
  if (dtype != kDtypeFloat64) {
    throw ValidationError("tensor file: unsupported dtype tag " + std::to_string(dtype));
  }
  const auto rank = get_le<std::uint32_t>(bytes, offset);
  if (rank == 0 || rank > 16) throw ValidationError("tensor file: bad rank " + std::to_string(rank));
  Tensor t;
  for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(get_le<std::uint32_t>(bytes, offset));
  const std::size_t count = t.element_count();
  if (bytes.size() - offset != count * 8) {
    throw ValidationError("tensor file: payload holds " + std::to_string((bytes.size() - offset) / 8) +
                          " values, shape needs " + std::to_string(count));
  }
  t.data.resize(count);
  for (auto& v : t.data) v = get_le<double>(bytes, offset);
  return t;
}

std::string encode_json(const Tensor& t) {
  t.validate();
  nlohmann::json j;
  j["shape"] = t.shape;
  j["data"] = t.data;
  return j.dump();
}

Tensor decode_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("tensor json: ") + e.what());
  }
  if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
    throw ValidationError("tensor json: expected {\"shape\": [...], \"data\": [...]}");
  }
  Tensor t;
  try {
    t.shape = j["shape"].get<std::vector<std::uint32_t>>();
    t.data = j["data"].get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("tensor json: ") + e.what());
  }
  t.validate();
  return t;
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0) return decode_binary(bytes);
  return decode_json(std::string(bytes.begin(), bytes.end()));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, TensorFormat format) {
  if (format == TensorFormat::Json) {
    const auto text = encode_json(t);
    write_bytes_atomic(path, text.data(), text.size());
  } else {
    const auto bytes = encode_binary(t);
    write_bytes_atomic(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  write_bytes_atomic(path, content.data(), content.size());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

AttentionStack to_stack(const Tensor& t, std::vector<HeadSlot> slots) {
  t.validate();
  std::size_t batch = 1, heads = 1, length = 0;
  if (t.shape.size() == 2) {
    length = t.shape[0];
    if (t.shape[1] != length) throw ValidationError("attention tensor must be square");
  } else if (t.shape.size() == 4) {
    batch = t.shape[0];
    heads = t.shape[1];
    length = t.shape[2];
    if (t.shape[3] != length) throw ValidationError("attention tensor must be square in its last two axes");
  } else {
    throw ValidationError("attention tensor must have rank 2 or 4, got rank " +
                          std::to_string(t.shape.size()));
  }
  if (slots.empty()) slots = AttentionStack::layered_slots(heads, heads);
  if (slots.size() != heads) throw ValidationError("head layout does not match head count");
  const std::size_t block = length * length;
  std::vector<AttentionMatrix> matrices;
  matrices.reserve(batch * heads);
  for (std::size_t m = 0; m < batch * heads; ++m) {
    const auto first = t.data.begin() + static_cast<std::ptrdiff_t>(m * block);
    try {
      matrices.emplace_back(length, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(block)));
    } catch (const ValidationError& e) {
      throw ValidationError("matrix (batch " + std::to_string(m / heads) + ", head " +
                            std::to_string(m % heads) + "): " + e.what());
    }
  }
  return AttentionStack(batch, heads, std::move(matrices), std::move(slots));
}

AttentionStack to_stack(const Tensor& t, std::size_t heads_per_layer) {
  const std::size_t heads = t.shape.size() == 4 ? t.shape[1] : 1;
  return to_stack(t, AttentionStack::layered_slots(heads, heads_per_layer == 0 ? heads : heads_per_layer));
}

Tensor from_stack(const AttentionStack& stack, bool as_matrix) {
  Tensor t;
  const auto l = static_cast<std::uint32_t>(stack.length());
  if (as_matrix) {
    if (stack.matrices().size() != 1) throw ValidationError("from_stack: more than one matrix");
    t.shape = {l, l};
  } else {
    t.shape = {static_cast<std::uint32_t>(stack.batch()), static_cast<std::uint32_t>(stack.heads()), l, l};
  }
  for (const auto& m : stack.matrices()) t.data.insert(t.data.end(), m.data().begin(), m.data().end());
  return t;
}

Tensor from_matrix(const AttentionMatrix& a) {
  Tensor t;
  t.shape = {static_cast<std::uint32_t>(a.size()), static_cast<std::uint32_t>(a.size())};
  t.data.assign(a.data().begin(), a.data().end());
  return t;
}

}  // namespace saobp::io
