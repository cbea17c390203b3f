// SPDX-License-Identifier: Apache-2.0
//
// One-step belief-propagation refinement of attention matrices.
//
// Every attention row A_j is a variable node whose label space is the L key
// positions and whose prior is the row itself. Each pair of rows shares one
// pairwise factor psi(r, k): 1 when r == k, w otherwise, with w = e^lambda
// (repulsive, "High") or w = e^-lambda ("Low"). A single round of message
// passing gives the factor-to-variable message
//
//   M[i][k] = sum_r psi(r, k) A_ir = A_ik + w (S_i - A_ik),   S_i = sum_r A_ir
//
// and the refined row j is
//
//   b_j(k) = A_jk * prod_{i != j} M[i][k] / Z_j.
//
// The recipient's own message is excluded from the product. Products are
// accumulated in log space so that L * lambda may be large.

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "saobp/core.hpp"

namespace saobp {

enum class FactorKind { High, Low, ElemMul };

std::string_view to_string(FactorKind kind);
/// Accepts "high", "low", "elemmul" (case-insensitive).
FactorKind parse_factor_kind(std::string_view name);

struct FactorSpec {
  FactorKind kind = FactorKind::High;
  double lambda = 0.0;

  static FactorSpec high(double lambda) { return {FactorKind::High, lambda}; }
  static FactorSpec low(double lambda) { return {FactorKind::Low, lambda}; }
  static FactorSpec elemmul() { return {FactorKind::ElemMul, 0.0}; }

  /// Throws ValidationError unless lambda is finite and nonnegative.
  void validate() const;
  /// psi(r, k) for r != k. Only meaningful for High and Low.
  double off_diagonal_weight() const;

  friend bool operator==(const FactorSpec&, const FactorSpec&) = default;
};

/// M[i][k]: message sent by source row i, evaluated at label k.
class MessageMatrix {
 public:
  MessageMatrix(std::size_t size, std::vector<double> entries)
      : size_(size), entries_(std::move(entries)) {}

  std::size_t size() const { return size_; }
  double operator()(std::size_t source, std::size_t label) const {
    return entries_[source * size_ + label];
  }
  std::span<const double> data() const { return entries_; }

 private:
  std::size_t size_;
  std::vector<double> entries_;
};

struct RefinementReport {
  FactorSpec spec;
  bool masked = false;
  double input_entropy = 0.0;
  double output_entropy = 0.0;
  /// Per row, max_k |out_jk - in_jk|.
  std::vector<double> row_change;
  /// Per row, log Z_j of the unnormalized belief A_jk * prod M[i][k].
  std::vector<double> log_normalizers;

  double max_change() const;
};

struct Refinement {
  AttentionMatrix attention;
  RefinementReport report;
};

/// Messages for a High or Low factor. Uses the actual row sums S_i.
MessageMatrix compute_messages(const AttentionMatrix& a, const FactorSpec& spec);

/// Bidirectional refinement (High or Low factor).
Refinement refine_bp(const AttentionMatrix& a, const FactorSpec& spec);

/// Row i of the output is row i of A * A^T, renormalized.
Refinement refine_elemmul(const AttentionMatrix& a);

/// Causal refinement: row j only receives messages from rows i < j and only
/// labels k <= j are scored. Input must be lower-triangular.
Refinement refine_bp_masked(const AttentionMatrix& a, const FactorSpec& spec);

/// Dispatches on spec.kind. ElemMul has no masked form and throws if
/// `masked` is set.
Refinement refine(const AttentionMatrix& a, const FactorSpec& spec, bool masked = false);

/// Refines every matrix of the stack, head slots preserved.
AttentionStack refine_stack(const AttentionStack& stack, const FactorSpec& spec,
                            bool masked = false,
                            std::vector<RefinementReport>* reports = nullptr);

/// Largest L accepted by oracle_refine.
inline constexpr std::size_t kOracleMaxSize = 64;

/// Literal sum-product evaluation with scalar loops: for every (j, k) the
/// message sum_r psi(r, k) A_ir is formed explicitly for each source i and
/// multiplied into the prior. `self_exclusion` drops i == j from the
/// product; `masked` restricts sources to i < j and labels to k <= j.
/// Intended as a verification reference, not for production use.
AttentionMatrix oracle_refine(const AttentionMatrix& a, const FactorSpec& spec,
                              bool self_exclusion, bool masked = false);

/// Parameter-count tiers for the default repulsion strength.
struct LambdaSchedule {
  std::int64_t small_limit = 15'000'000;
  std::int64_t medium_limit = 35'000'000;
  double small = 0.2;
  double medium = 0.08;
  double large = 0.05;
};

double lambda_for_scale(std::int64_t parameter_count, const LambdaSchedule& schedule = {});

/// Vector-Jacobian product of refine(). `input` is the matrix that was
/// refined, `output` the refined result and `grad_output` dLoss/dOutput
/// (row-major L x L). Returns dLoss/dInput. With `stop_message_gradient`
/// the messages are treated as constants and only the prior path carries
/// gradient.
std::vector<double> refine_backward(const AttentionMatrix& input, const AttentionMatrix& output,
                                    const FactorSpec& spec, bool masked,
                                    std::span<const double> grad_output,
                                    bool stop_message_gradient = false);

}  // namespace saobp
