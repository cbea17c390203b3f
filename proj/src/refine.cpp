// SPDX-License-Identifier: Apache-2.0

#include "saobp/refine.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <string>

namespace saobp {

namespace {

void require_message_kind(const FactorSpec& spec, const char* where) {
  spec.validate();
  if (spec.kind == FactorKind::ElemMul) {
    throw ValidationError(std::string(where) + ": ElemMul has no message form");
  }
}

// log M[i][k], using the computed row sums S_i.
std::vector<double> log_messages(const AttentionMatrix& a, double weight) {
  const std::size_t n = a.size();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = a.row(i);
    double s = 0.0;
    for (const double v : row) s += v;
    for (std::size_t k = 0; k < n; ++k) {
      out[i * n + k] = std::log(weight * s + (1.0 - weight) * row[k]);
    }
  }
  return out;
}

// Writes the normalized belief A_jk * exp(score_k) over labels [0, width)
// into `dst` and returns log Z_j.
double normalize_belief(std::span<const double> prior, std::span<const double> score,
                        std::size_t width, double* dst) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < width; ++k) {
    if (prior[k] > 0.0) peak = std::max(peak, score[k]);
  }
  double z = 0.0;
  for (std::size_t k = 0; k < width; ++k) {
    dst[k] = prior[k] > 0.0 ? prior[k] * std::exp(score[k] - peak) : 0.0;
    z += dst[k];
  }
  if (!(z > 0.0)) return -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < width; ++k) dst[k] /= z;
  return std::log(z) + peak;
}

RefinementReport make_report(const AttentionMatrix& in, const AttentionMatrix& out,
                             const FactorSpec& spec, bool masked,
                             std::vector<double> log_normalizers) {
  RefinementReport report;
  report.spec = spec;
  report.masked = masked;
  report.input_entropy = attention_entropy(in);
  report.output_entropy = attention_entropy(out);
  report.log_normalizers = std::move(log_normalizers);
  const std::size_t n = in.size();
  report.row_change.assign(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      report.row_change[j] = std::max(report.row_change[j], std::abs(out(j, k) - in(j, k)));
    }
  }
  return report;
}

void check_normalizers(const std::vector<double>& log_z) {
  for (std::size_t j = 0; j < log_z.size(); ++j) {
    if (!std::isfinite(log_z[j])) {
      throw ValidationError("refinement: zero normalizer for row " + std::to_string(j));
    }
  }
}

}  // namespace

std::string_view to_string(FactorKind kind) {
  switch (kind) {
    case FactorKind::High:
      return "high";
    case FactorKind::Low:
      return "low";
    case FactorKind::ElemMul:
      return "elemmul";
  }
  return "unknown";
}

FactorKind parse_factor_kind(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "high") return FactorKind::High;
  if (lower == "low") return FactorKind::Low;
  if (lower == "elemmul") return FactorKind::ElemMul;
  throw ValidationError("unknown refinement variant '" + std::string(name) + "'");
}

void FactorSpec::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw ValidationError("lambda must be finite and nonnegative, got " + std::to_string(lambda));
  }
}

double FactorSpec::off_diagonal_weight() const {
  return kind == FactorKind::Low ? std::exp(-lambda) : std::exp(lambda);
}

double RefinementReport::max_change() const {
  return row_change.empty() ? 0.0 : *std::max_element(row_change.begin(), row_change.end());
}

MessageMatrix compute_messages(const AttentionMatrix& a, const FactorSpec& spec) {
  require_message_kind(spec, "compute_messages");
  const double w = spec.off_diagonal_weight();
  const std::size_t n = a.size();
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = a.row(i);
    double s = 0.0;
    for (const double v : row) s += v;
    for (std::size_t k = 0; k < n; ++k) m[i * n + k] = w * s + (1.0 - w) * row[k];
  }
  return MessageMatrix(n, std::move(m));
}

Refinement refine_bp(const AttentionMatrix& a, const FactorSpec& spec) {
  require_message_kind(spec, "refine_bp");
  const std::size_t n = a.size();
  const auto log_m = log_messages(a, spec.off_diagonal_weight());

  std::vector<double> total(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) total[k] += log_m[i * n + k];
  }

  std::vector<double> out(n * n);
  std::vector<double> score(n);
  std::vector<double> log_z(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < n; ++k) score[k] = total[k] - log_m[j * n + k];
    log_z[j] = normalize_belief(a.row(j), score, n, out.data() + j * n);
  }
  check_normalizers(log_z);
  AttentionMatrix refined(n, std::move(out));
  auto report = make_report(a, refined, spec, false, std::move(log_z));
  return {std::move(refined), std::move(report)};
}

Refinement refine_bp_masked(const AttentionMatrix& a, const FactorSpec& spec) {
  require_message_kind(spec, "refine_bp_masked");
  if (a.upper_mass() > 1e-12) {
    throw ValidationError("refine_bp_masked: input has mass " + std::to_string(a.upper_mass()) +
                          " above the diagonal");
  }
  const std::size_t n = a.size();
  const auto log_m = log_messages(a, spec.off_diagonal_weight());

  std::vector<double> out(n * n, 0.0);
  std::vector<double> prefix(n, 0.0);  // sum over sources i < j
  std::vector<double> log_z(n);
  for (std::size_t j = 0; j < n; ++j) {
    log_z[j] = normalize_belief(a.row(j), prefix, j + 1, out.data() + j * n);
    for (std::size_t k = 0; k < n; ++k) prefix[k] += log_m[j * n + k];
  }
  check_normalizers(log_z);
  AttentionMatrix refined(n, std::move(out));
  auto report = make_report(a, refined, spec, true, std::move(log_z));
  return {std::move(refined), std::move(report)};
}

Refinement refine_elemmul(const AttentionMatrix& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n * n, 0.0);
  std::vector<double> log_z(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ai = a.row(i);
    double* dst = out.data() + i * n;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const auto aj = a.row(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k) dot += ai[k] * aj[k];
      dst[j] = dot;
      z += dot;
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= z;
    log_z[i] = std::log(z);
  }
  check_normalizers(log_z);
  AttentionMatrix refined(n, std::move(out));
  auto report = make_report(a, refined, FactorSpec::elemmul(), false, std::move(log_z));
  return {std::move(refined), std::move(report)};
}

Refinement refine(const AttentionMatrix& a, const FactorSpec& spec, bool masked) {
  spec.validate();
  if (spec.kind == FactorKind::ElemMul) {
    if (masked) throw ValidationError("refine: ElemMul has no masked variant");
    return refine_elemmul(a);
  }
  return masked ? refine_bp_masked(a, spec) : refine_bp(a, spec);
}

AttentionStack refine_stack(const AttentionStack& stack, const FactorSpec& spec, bool masked,
                            std::vector<RefinementReport>* reports) {
  std::vector<AttentionMatrix> out;
  out.reserve(stack.matrices().size());
  if (reports) reports->clear();
  for (const auto& m : stack.matrices()) {
    auto r = refine(m, spec, masked);
    out.push_back(std::move(r.attention));
    if (reports) reports->push_back(std::move(r.report));
  }
  return AttentionStack(stack.batch(), stack.heads(), std::move(out), stack.slots());
}

AttentionMatrix oracle_refine(const AttentionMatrix& a, const FactorSpec& spec,
                              bool self_exclusion, bool masked) {
  require_message_kind(spec, "oracle_refine");
  const std::size_t n = a.size();
  if (n > kOracleMaxSize) {
    throw ValidationError("oracle_refine: size " + std::to_string(n) + " exceeds " +
                          std::to_string(kOracleMaxSize));
  }
  const double w = spec.off_diagonal_weight();
  const double scale = std::max(1.0, w);  // keeps products of up to 63 messages <= 1
  auto psi = [w](std::size_t r, std::size_t k) { return r == k ? 1.0 : w; };

  std::vector<double> out(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t labels = masked ? j + 1 : n;
    double z = 0.0;
    for (std::size_t k = 0; k < labels; ++k) {
      double belief = a(j, k);
      for (std::size_t i = 0; i < n; ++i) {
        if (self_exclusion && i == j) continue;
        if (masked && i > j) continue;
        double message = 0.0;
        for (std::size_t r = 0; r < n; ++r) message += psi(r, k) * a(i, r);
        belief *= message / scale;
      }
      out[j * n + k] = belief;
      z += belief;
    }
    if (!(z > 0.0)) throw ValidationError("oracle_refine: zero normalizer for row " + std::to_string(j));
    for (std::size_t k = 0; k < labels; ++k) out[j * n + k] /= z;
  }
  return AttentionMatrix(n, std::move(out));
}

double lambda_for_scale(std::int64_t parameter_count, const LambdaSchedule& schedule) {
  if (parameter_count <= 0) throw ValidationError("lambda_for_scale: parameter count must be positive");
  if (parameter_count <= schedule.small_limit) return schedule.small;
  if (parameter_count <= schedule.medium_limit) return schedule.medium;
  return schedule.large;
}

std::vector<double> refine_backward(const AttentionMatrix& input, const AttentionMatrix& output,
                                    const FactorSpec& spec, bool masked,
                                    std::span<const double> grad_output,
                                    bool stop_message_gradient) {
  const std::size_t n = input.size();
  if (output.size() != n || grad_output.size() != n * n) {
    throw ValidationError("refine_backward: shape mismatch");
  }
  std::vector<double> grad(n * n, 0.0);

  if (spec.kind == FactorKind::ElemMul) {
    // out = diag(1/Z) A A^T, dP = (g - <g, out>_row) / Z, dA = (dP + dP^T) A.
    std::vector<double> d_product(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto ai = input.row(i);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += ai[k] * input(j, k);
        z += dot;
      }
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += grad_output[i * n + j] * output(i, j);
      for (std::size_t j = 0; j < n; ++j) d_product[i * n + j] = (grad_output[i * n + j] - inner) / z;
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double d = d_product[i * n + j] + d_product[j * n + i];
        if (d == 0.0) continue;
        const auto aj = input.row(j);
        for (std::size_t k = 0; k < n; ++k) grad[i * n + k] += d * aj[k];
      }
    }
    return grad;
  }

  spec.validate();
  const double w = spec.off_diagonal_weight();

  // Gradient w.r.t. the pre-normalization log-belief of each row.
  std::vector<double> d_score(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t labels = masked ? j + 1 : n;
    double inner = 0.0;
    for (std::size_t k = 0; k < labels; ++k) inner += grad_output[j * n + k] * output(j, k);
    for (std::size_t k = 0; k < labels; ++k) {
      const double b = output(j, k);
      d_score[j * n + k] = b * (grad_output[j * n + k] - inner);
      // Prior path: d log A_jk = d_score, so dA_jk = d_score / A_jk.
      const double a = input(j, k);
      if (a > 0.0) grad[j * n + k] += d_score[j * n + k] / a;
    }
  }
  if (stop_message_gradient) return grad;

  // d log M[i][k]: dense rows receive from every j != i, masked from j > i.
  std::vector<double> d_log_m(n * n, 0.0);
  if (masked) {
    std::vector<double> suffix(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t k = 0; k < n; ++k) d_log_m[i * n + k] = suffix[k];
      for (std::size_t k = 0; k < n; ++k) suffix[k] += d_score[i * n + k];
    }
  } else {
    std::vector<double> column(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) column[k] += d_score[j * n + k];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) d_log_m[i * n + k] = column[k] - d_score[i * n + k];
    }
  }

  // M[i][k] = w S_i + (1 - w) A_ik.
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = input.row(i);
    double s = 0.0;
    for (const double v : row) s += v;
    double d_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double d_m = d_log_m[i * n + k] / (w * s + (1.0 - w) * row[k]);
      grad[i * n + k] += (1.0 - w) * d_m;
      d_sum += d_m;
    }
    for (std::size_t k = 0; k < n; ++k) grad[i * n + k] += w * d_sum;
  }
  return grad;
}

}  // namespace saobp
