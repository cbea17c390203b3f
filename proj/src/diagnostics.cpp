// SPDX-License-Identifier: Apache-2.0

#include "saobp/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace saobp {

namespace {

// out = lhs * rhs, both n x n row-major.
void multiply(std::span<const double> lhs, std::span<const double> rhs, std::size_t n,
              std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < n; ++m) {
      const double a = lhs[i * n + m];
      if (a == 0.0) continue;
      const double* src = rhs.data() + m * n;
      double* dst = out.data() + i * n;
      for (std::size_t k = 0; k < n; ++k) dst[k] += a * src[k];
    }
  }
}

double frobenius_squared(std::span<const double> values) {
  double s = 0.0;
  for (const double v : values) s += v * v;
  return s;
}

}  // namespace

void GtdConfig::validate() const {
  if (!(beta > 0.0 && beta < 1.0)) {
    throw ValidationError("beta must lie in (0, 1), got " + std::to_string(beta));
  }
  if (max_hop < 2) throw ValidationError("K must be at least 2, got " + std::to_string(max_hop));
}

double GtdConfig::row_mass() const {
  double mass = 0.0;
  double w = 1.0;
  for (int t = 2; t <= max_hop; ++t) {
    w *= beta;
    mass += w;
  }
  return mass;
}

GlobalMatrix global_matrix(const AttentionMatrix& a, const GtdConfig& config) {
  config.validate();
  const std::size_t n = a.size();
  std::vector<double> power(a.data().begin(), a.data().end());
  std::vector<double> next(n * n);
  std::vector<double> g(n * n, 0.0);
  double weight = 1.0;
  for (int t = 2; t <= config.max_hop; ++t) {
    multiply(power, a.data(), n, next);
    power.swap(next);
    weight *= config.beta;
    for (std::size_t e = 0; e < g.size(); ++e) g[e] += weight * power[e];
  }
  return GlobalMatrix(n, std::move(g), config);
}

double gtd(const AttentionMatrix& a, const GlobalMatrix& g) {
  const double ga = frobenius_squared(g.data());
  return ga / (frobenius_squared(a.data()) + ga);
}

double gtd(const AttentionMatrix& a, const GtdConfig& config) {
  return gtd(a, global_matrix(a, config));
}

double indirect_entropy(const GlobalMatrix& g) {
  const std::size_t n = g.size();
  std::vector<double> normalized(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = g.row(i);
    double s = 0.0;
    for (const double v : row) s += v;
    for (std::size_t j = 0; j < n; ++j) normalized[j] = row[j] / s;
    total += distribution_entropy(normalized);
  }
  return total / static_cast<double>(n);
}

double sparsity(const AttentionMatrix& a, double epsilon) {
  if (!(epsilon > 0.0)) throw ValidationError("sparsity: epsilon must be positive");
  std::size_t below = 0;
  for (const double v : a.data()) {
    if (v < epsilon) ++below;
  }
  return static_cast<double>(below) / static_cast<double>(a.data().size());
}

std::string_view to_string(GtdHealth health) {
  switch (health) {
    case GtdHealth::Low:
      return "low";
    case GtdHealth::Healthy:
      return "healthy";
    case GtdHealth::High:
      return "high";
  }
  return "unknown";
}

GtdHealth gtd_health(double g, const HealthBands& bands) {
  if (g < bands.low) return GtdHealth::Low;
  if (g > bands.high) return GtdHealth::High;
  return GtdHealth::Healthy;
}

DiagnosticRow diagnose(const AttentionMatrix& a, const GtdConfig& config, double epsilon) {
  const GlobalMatrix g = global_matrix(a, config);
  DiagnosticRow row;
  row.gtd = gtd(a, g);
  row.indirect_entropy = indirect_entropy(g);
  row.mean_entropy = attention_entropy(a);
  row.sparsity = sparsity(a, epsilon);
  return row;
}

StackProfile profile_stack(const AttentionStack& stack, const GtdConfig& config, double epsilon) {
  config.validate();
  StackProfile profile;
  const double batch = static_cast<double>(stack.batch());

  std::vector<DiagnosticRow> rows(stack.heads());
  for (std::size_t h = 0; h < stack.heads(); ++h) {
    DiagnosticRow acc;
    acc.layer = stack.slot(h).layer;
    acc.head = stack.slot(h).head;
    for (std::size_t b = 0; b < stack.batch(); ++b) {
      const DiagnosticRow one = diagnose(stack.at(b, h), config, epsilon);
      acc.gtd += one.gtd;
      acc.indirect_entropy += one.indirect_entropy;
      acc.mean_entropy += one.mean_entropy;
      acc.sparsity += one.sparsity;
    }
    acc.gtd /= batch;
    acc.indirect_entropy /= batch;
    acc.mean_entropy /= batch;
    acc.sparsity /= batch;
    rows[h] = acc;
  }
  std::stable_sort(rows.begin(), rows.end(), [](const DiagnosticRow& x, const DiagnosticRow& y) {
    return x.layer != y.layer ? x.layer < y.layer : x.head < y.head;
  });

  std::map<int, std::pair<LayerProfile, int>> layers;
  for (const auto& r : rows) {
    auto& [lp, count] = layers[r.layer];
    lp.layer = r.layer;
    lp.gtd += r.gtd;
    lp.indirect_entropy += r.indirect_entropy;
    lp.mean_entropy += r.mean_entropy;
    lp.sparsity += r.sparsity;
    ++count;
  }
  for (auto& [layer, entry] : layers) {
    auto& [lp, count] = entry;
    lp.gtd /= count;
    lp.indirect_entropy /= count;
    lp.mean_entropy /= count;
    lp.sparsity /= count;
    profile.layers.push_back(lp);
  }
  const int last = profile.layers.back().layer;
  for (const auto& r : rows) {
    if (r.layer == last) profile.final_layer_head_entropy.push_back(r.mean_entropy);
  }
  profile.rows = std::move(rows);
  return profile;
}

}  // namespace saobp
