// SPDX-License-Identifier: Apache-2.0
//
// Localization diagnostics for attention heads: the discounted multi-hop
// matrix G = sum_{t=2..K} beta^(t-1) A^t, global token dependency
// ||G||^2 / (||A||^2 + ||G||^2), indirect entropy of row-normalized G,
// sparsity, and per-layer/per-head profiles of a stack.

#pragma once

#include <string_view>
#include <vector>

#include "saobp/core.hpp"

namespace saobp {

struct GtdConfig {
  double beta = 0.9;
  int max_hop = 4;

  void validate() const;
  /// sum_{t=2..K} beta^(t-1), the row sum of every G.
  double row_mass() const;
};

class GlobalMatrix {
 public:
  GlobalMatrix(std::size_t size, std::vector<double> entries, GtdConfig config)
      : size_(size), entries_(std::move(entries)), config_(config) {}

  std::size_t size() const { return size_; }
  double operator()(std::size_t row, std::size_t col) const {
    return entries_[row * size_ + col];
  }
  std::span<const double> row(std::size_t i) const {
    return {entries_.data() + i * size_, size_};
  }
  std::span<const double> data() const { return entries_; }
  const GtdConfig& config() const { return config_; }

 private:
  std::size_t size_;
  std::vector<double> entries_;
  GtdConfig config_;
};

/// Powers are formed by repeated multiplication, no truncation of small
/// entries.
GlobalMatrix global_matrix(const AttentionMatrix& a, const GtdConfig& config = {});

double gtd(const AttentionMatrix& a, const GtdConfig& config = {});
/// Same as above with G already computed from `a`.
double gtd(const AttentionMatrix& a, const GlobalMatrix& g);

double indirect_entropy(const GlobalMatrix& g);

/// Fraction of entries strictly below epsilon.
double sparsity(const AttentionMatrix& a, double epsilon = 1e-3);

enum class GtdHealth { Low, Healthy, High };

std::string_view to_string(GtdHealth health);

struct HealthBands {
  double low = 0.5;
  double high = 0.85;
};

/// low below bands.low, high above bands.high, healthy in between
/// (inclusive).
GtdHealth gtd_health(double g, const HealthBands& bands = {});

struct DiagnosticRow {
  int layer = 0;
  int head = 0;
  double gtd = 0.0;
  double indirect_entropy = 0.0;
  double mean_entropy = 0.0;
  double sparsity = 0.0;
};

/// Per-layer means over heads.
struct LayerProfile {
  int layer = 0;
  double gtd = 0.0;
  double indirect_entropy = 0.0;
  double mean_entropy = 0.0;
  double sparsity = 0.0;
};

struct StackProfile {
  /// One per (layer, head), batch-averaged, ordered layer-major.
  std::vector<DiagnosticRow> rows;
  /// One per layer, ascending.
  std::vector<LayerProfile> layers;
  /// Mean entropy of each head of the deepest layer.
  std::vector<double> final_layer_head_entropy;
};

/// Diagnostics of a single matrix (layer and head left at 0).
DiagnosticRow diagnose(const AttentionMatrix& a, const GtdConfig& config = {},
                       double epsilon = 1e-3);

/// Averages each head over the batch in fixed order, then each layer over
/// its heads. Mean entropy is the per-row entropy averaged over positions.
StackProfile profile_stack(const AttentionStack& stack, const GtdConfig& config = {},
                           double epsilon = 1e-3);

}  // namespace saobp
