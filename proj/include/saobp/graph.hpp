// SPDX-License-Identifier: Apache-2.0
//
// Token graphs projected from attention matrices, and the classical graph
// metrics (clustering coefficient, betweenness centrality) used to sanity
// check GTD, plus Pearson correlation with a t-test p-value.

#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "saobp/core.hpp"

namespace saobp {

/// Simple undirected graph without self-loops.
class TokenGraph {
 public:
  explicit TokenGraph(std::size_t nodes, double tau = 0.0);

  static TokenGraph from_edges(std::size_t nodes,
                               std::span<const std::pair<std::size_t, std::size_t>> edges);

  void add_edge(std::size_t u, std::size_t v);

  std::size_t nodes() const { return adjacency_.size(); }
  std::size_t edge_count() const;
  double tau() const { return tau_; }
  bool has_edge(std::size_t u, std::size_t v) const;
  /// Sorted neighbour list.
  const std::vector<std::size_t>& neighbors(std::size_t v) const { return adjacency_[v]; }

  bool empty() const { return edge_count() == 0; }
  bool complete() const;
  /// Empty or complete graphs, where CC/BC carry no information.
  bool degenerate() const { return empty() || complete(); }

 private:
  std::vector<std::vector<std::size_t>> adjacency_;
  double tau_;
};

inline constexpr double kDefaultTau = 1e-4;
inline constexpr std::size_t kDefaultSubgraphNodes = 40;

/// Edge (i, j), i != j, iff (A_ij + A_ji) / 2 > tau, restricted to the
/// first min(L, max_nodes) positions.
TokenGraph project(const AttentionMatrix& a, double tau = kDefaultTau,
                   std::size_t max_nodes = kDefaultSubgraphNodes);

/// Local clustering 2 T(v) / (d(v) (d(v) - 1)) averaged over all nodes;
/// nodes of degree < 2 contribute 0.
double clustering_coefficient(const TokenGraph& g);

/// Unnormalized betweenness of every node (Brandes accumulation, each
/// unordered pair counted once).
std::vector<double> node_betweenness(const TokenGraph& g);

/// Mean of node_betweenness.
double betweenness_centrality(const TokenGraph& g);

struct CorrelationResult {
  double r = 0.0;
  std::size_t samples = 0;
  double p_value = 1.0;
};

/// Sample Pearson correlation; two-sided p-value from Student's t with
/// n - 2 degrees of freedom. Throws ValidationError for fewer than three
/// samples, mismatched lengths or a constant series.
CorrelationResult pearson(std::span<const double> xs, std::span<const double> ys);

}  // namespace saobp
