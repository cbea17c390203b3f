// SPDX-License-Identifier: Apache-2.0
//
// Tensor files and diagnostic tables.
//
// Binary tensor layout (all integers and floats little-endian):
//
//   offset  size      field
//   0       4         magic "SAOB"
//   4       2         format version (u16, currently 1)
//   6       2         dtype tag (u16, 1 = float64)
//   8       4         rank (u32)
//   12      4 * rank  dims (u32 each)
//   ...     8 * N     row-major float64 payload, N = product of dims
//
// The JSON form is {"shape": [...], "data": [...]}.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "saobp/core.hpp"
#include "saobp/diagnostics.hpp"

namespace saobp::io {

inline constexpr char kMagic[4] = {'S', 'A', 'O', 'B'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::uint16_t kDtypeFloat64 = 1;

struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<double> data;

  std::size_t element_count() const;
  /// Throws ValidationError if data.size() differs from the shape product.
  void validate() const;
};

enum class TensorFormat { Binary, Json };

std::vector<std::uint8_t> encode_binary(const Tensor& t);
Tensor decode_binary(const std::vector<std::uint8_t>& bytes);
std::string encode_json(const Tensor& t);
Tensor decode_json(const std::string& text);

/// Detects the format from the leading bytes.
Tensor read_tensor(const std::filesystem::path& path);
/// Atomic: writes a sibling temp file, then renames it over `path`.
void write_tensor(const std::filesystem::path& path, const Tensor& t,
                  TensorFormat format = TensorFormat::Binary);

/// Rank-2 L x L becomes a 1 x 1 stack; rank-4 B x H x L x L keeps its axes.
/// Head slots come from heads_per_layer (0 means all heads in layer 0).
AttentionStack to_stack(const Tensor& t, std::size_t heads_per_layer = 0);
AttentionStack to_stack(const Tensor& t, std::vector<HeadSlot> slots);
Tensor from_stack(const AttentionStack& stack, bool as_matrix);
Tensor from_matrix(const AttentionMatrix& a);

/// Shortest decimal representation that round-trips.
std::string format_double(double v);

/// Atomic text write.
void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

/// Header is `layer,head,gtd,indirect_entropy,mean_entropy,sparsity,gtd_health`,
/// preceded by a `# beta=...,K=...,epsilon=...` comment line.
std::string diagnostics_csv(const std::vector<DiagnosticRow>& rows, const GtdConfig& config,
                            double epsilon, const HealthBands& bands = {});
std::string diagnostics_json(const std::vector<DiagnosticRow>& rows, const HealthBands& bands = {});

/// Minimal CSV reader for the tables this library writes: skips `#`
/// comment lines, returns the header and the data rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvTable parse_csv(const std::string& text);

}  // namespace saobp::io
