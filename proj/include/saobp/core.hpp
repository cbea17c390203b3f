// SPDX-License-Identifier: Apache-2.0
//
// Attention matrices, score matrices, stacks of heads, and the softmax and
// entropy primitives the rest of the library builds on.

#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace saobp {

/// Raised when an input violates a documented invariant (bad shape, row
/// that does not sum to one, non-finite score, out-of-range index ...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row sums may deviate from 1 by this much and still count as stochastic.
inline constexpr double kRowSumTolerance = 1e-9;
/// Rows deviating by less than this are renormalized on construction.
inline constexpr double kRenormalizeTolerance = 1e-6;
/// Entries below this are exact zeros inside entropy sums.
inline constexpr double kEntropyFloor = 1e-15;

/// L x L scores (pre-softmax logits), row-major. All entries finite.
class ScoreMatrix {
 public:
  ScoreMatrix(std::size_t size, std::vector<double> entries);

  static ScoreMatrix zeros(std::size_t size);

  std::size_t size() const { return size_; }
  double operator()(std::size_t row, std::size_t col) const {
    return entries_[row * size_ + col];
  }
  std::span<const double> row(std::size_t i) const {
    return {entries_.data() + i * size_, size_};
  }
  std::span<const double> data() const { return entries_; }

 private:
  std::size_t size_;
  std::vector<double> entries_;
};

/// L x L row-stochastic matrix, row-major. Row i is the attention
/// distribution of query token i over the L key tokens.
class AttentionMatrix {
 public:
  /// Validates entries. Rows whose sum is off by less than
  /// kRenormalizeTolerance are divided by their sum; larger deviations,
  /// negative entries and non-finite values throw ValidationError.
  AttentionMatrix(std::size_t size, std::vector<double> entries);

  static AttentionMatrix identity(std::size_t size);
  static AttentionMatrix uniform(std::size_t size);
  /// Lower-triangular matrix whose row i is uniform over columns 0..i.
  static AttentionMatrix causal_uniform(std::size_t size);

  std::size_t size() const { return size_; }
  double operator()(std::size_t row, std::size_t col) const {
    return entries_[row * size_ + col];
  }
  std::span<const double> row(std::size_t i) const {
    return {entries_.data() + i * size_, size_};
  }
  std::span<const double> data() const { return entries_; }

  /// Largest entry strictly above the diagonal.
  double upper_mass() const;
  bool is_lower_triangular(double tolerance = 0.0) const {
    return upper_mass() <= tolerance;
  }

  AttentionMatrix permuted(std::span<const std::size_t> perm) const;

  friend bool operator==(const AttentionMatrix&, const AttentionMatrix&) = default;

 private:
  std::size_t size_;
  std::vector<double> entries_;
};

/// Position of one head inside a model: which layer, which head.
struct HeadSlot {
  int layer = 0;
  int head = 0;
  friend bool operator==(const HeadSlot&, const HeadSlot&) = default;
};

/// B x H collection of L x L attention matrices. Each of the H head
/// positions carries a (layer, head) slot so that a flattened
/// layers*heads axis can be profiled per layer.
class AttentionStack {
 public:
  /// `matrices` is batch-major: index b * heads + h. Every slot defaults to
  /// layer 0, head h.
  AttentionStack(std::size_t batch, std::size_t heads,
                 std::vector<AttentionMatrix> matrices);
  AttentionStack(std::size_t batch, std::size_t heads,
                 std::vector<AttentionMatrix> matrices,
                 std::vector<HeadSlot> slots);

  /// Interprets the H axis as layers x heads_per_layer.
  static std::vector<HeadSlot> layered_slots(std::size_t heads,
                                             std::size_t heads_per_layer);

  std::size_t batch() const { return batch_; }
  std::size_t heads() const { return heads_; }
  std::size_t length() const { return length_; }
  const AttentionMatrix& at(std::size_t b, std::size_t h) const {
    return matrices_[b * heads_ + h];
  }
  const HeadSlot& slot(std::size_t h) const { return slots_[h]; }
  const std::vector<HeadSlot>& slots() const { return slots_; }
  const std::vector<AttentionMatrix>& matrices() const { return matrices_; }

 private:
  std::size_t batch_;
  std::size_t heads_;
  std::size_t length_;
  std::vector<AttentionMatrix> matrices_;
  std::vector<HeadSlot> slots_;
};

/// Row-wise softmax. With `causal`, entries above the diagonal are treated
/// as -inf and come out exactly zero.
AttentionMatrix softmax_rows(const ScoreMatrix& scores, bool causal);

/// Shannon entropy of row i in nats, with 0 log 0 = 0.
double attention_entropy_row(const AttentionMatrix& a, std::size_t i);

/// Mean of the row entropies, in nats. Lies in [0, ln L].
double attention_entropy(const AttentionMatrix& a);

/// Entropy of an arbitrary nonnegative vector that sums to one.
double distribution_entropy(std::span<const double> p);

}  // namespace saobp
