// SPDX-License-Identifier: Apache-2.0

#include "saobp/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <string>

#include <boost/math/distributions/students_t.hpp>

namespace saobp {

TokenGraph::TokenGraph(std::size_t nodes, double tau) : adjacency_(nodes), tau_(tau) {}

TokenGraph TokenGraph::from_edges(std::size_t nodes,
                                  std::span<const std::pair<std::size_t, std::size_t>> edges) {
  TokenGraph g(nodes);
  for (const auto& [u, v] : edges) g.add_edge(u, v);
  return g;
}

void TokenGraph::add_edge(std::size_t u, std::size_t v) {
  if (u >= nodes() || v >= nodes()) throw ValidationError("add_edge: node out of range");
  if (u == v) throw ValidationError("add_edge: self-loops are not allowed");
  auto insert = [](std::vector<std::size_t>& list, std::size_t x) {
    auto it = std::lower_bound(list.begin(), list.end(), x);
    if (it == list.end() || *it != x) list.insert(it, x);
  };
  insert(adjacency_[u], v);
  insert(adjacency_[v], u);
}

std::size_t TokenGraph::edge_count() const {
  std::size_t twice = 0;
  for (const auto& list : adjacency_) twice += list.size();
  return twice / 2;
}

bool TokenGraph::has_edge(std::size_t u, std::size_t v) const {
  return std::binary_search(adjacency_[u].begin(), adjacency_[u].end(), v);
}

bool TokenGraph::complete() const {
  const std::size_t n = nodes();
  return n >= 2 && edge_count() == n * (n - 1) / 2;
}

TokenGraph project(const AttentionMatrix& a, double tau, std::size_t max_nodes) {
  if (!(tau > 0.0)) throw ValidationError("project: tau must be positive");
  if (max_nodes < 2) throw ValidationError("project: max_nodes must be at least 2");
  const std::size_t n = std::min(a.size(), max_nodes);
  TokenGraph g(n, tau);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if ((a(i, j) + a(j, i)) / 2.0 > tau) g.add_edge(i, j);
    }
  }
  return g;
}

double clustering_coefficient(const TokenGraph& g) {
  const std::size_t n = g.nodes();
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const auto& nb = g.neighbors(v);
    const std::size_t d = nb.size();
    if (d < 2) continue;
    std::size_t triangles = 0;
    for (std::size_t x = 0; x < d; ++x) {
      for (std::size_t y = x + 1; y < d; ++y) {
        if (g.has_edge(nb[x], nb[y])) ++triangles;
      }
    }
    total += 2.0 * static_cast<double>(triangles) / (static_cast<double>(d) * static_cast<double>(d - 1));
  }
  return total / static_cast<double>(n);
}

std::vector<double> node_betweenness(const TokenGraph& g) {
  const std::size_t n = g.nodes();
  std::vector<double> score(n, 0.0);
  std::vector<double> sigma(n);
  std::vector<double> delta(n);
  std::vector<long> dist(n);
  std::vector<std::vector<std::size_t>> preds(n);
  std::vector<std::size_t> order;
  order.reserve(n);

  for (std::size_t s = 0; s < n; ++s) {
    std::fill(sigma.begin(), sigma.end(), 0.0);
    std::fill(delta.begin(), delta.end(), 0.0);
    std::fill(dist.begin(), dist.end(), -1);
    for (auto& p : preds) p.clear();
    order.clear();

    sigma[s] = 1.0;
    dist[s] = 0;
    std::queue<std::size_t> frontier;
    frontier.push(s);
    while (!frontier.empty()) {
      const std::size_t v = frontier.front();
      frontier.pop();
      order.push_back(v);
      for (const std::size_t w : g.neighbors(v)) {
        if (dist[w] < 0) {
          dist[w] = dist[v] + 1;
          frontier.push(w);
        }
        if (dist[w] == dist[v] + 1) {
          sigma[w] += sigma[v];
          preds[w].push_back(v);
        }
      }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t w = *it;
      for (const std::size_t v : preds[w]) delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
      if (w != s) score[w] += delta[w];
    }
  }
  // Each unordered pair was visited from both endpoints.
  for (auto& x : score) x /= 2.0;
  return score;
}

double betweenness_centrality(const TokenGraph& g) {
  if (g.nodes() == 0) return 0.0;
  const auto scores = node_betweenness(g);
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

CorrelationResult pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("pearson: series lengths differ");
  const std::size_t n = xs.size();
  if (n < 3) throw ValidationError("pearson: need at least 3 samples, got " + std::to_string(n));
  const double nd = static_cast<double>(n);
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / nd;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / nd;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("pearson: zero variance, correlation undefined");

  CorrelationResult out;
  out.samples = n;
  out.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = nd - 2.0;
  const double residual = 1.0 - out.r * out.r;
  if (residual <= 0.0) {
    out.p_value = 0.0;
  } else {
    const double t = out.r * std::sqrt(df / residual);
    const boost::math::students_t dist(df);
    out.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
  }
  return out;
}

}  // namespace saobp
