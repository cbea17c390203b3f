// SPDX-License-Identifier: Apache-2.0

#include "saobp/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace saobp {

namespace {

void check_square(std::size_t size, std::size_t count, const char* what) {
  if (size == 0) {
    throw ValidationError(std::string(what) + ": size must be at least 1");
  }
  if (count != size * size) {
    std::ostringstream msg;
    msg << what << ": expected " << size * size << " entries for size " << size
        << ", got " << count;
    throw ValidationError(msg.str());
  }
}

std::string index_string(std::size_t size, std::size_t flat) {
  std::ostringstream out;
  out << "(" << flat / size << ", " << flat % size << ")";
  return out.str();
}

}  // namespace

ScoreMatrix::ScoreMatrix(std::size_t size, std::vector<double> entries)
    : size_(size), entries_(std::move(entries)) {
  check_square(size_, entries_.size(), "ScoreMatrix");
  for (std::size_t n = 0; n < entries_.size(); ++n) {
    if (!std::isfinite(entries_[n])) {
      throw ValidationError("ScoreMatrix: non-finite score at " +
                            index_string(size_, n));
    }
  }
}

ScoreMatrix ScoreMatrix::zeros(std::size_t size) {
  return ScoreMatrix(size, std::vector<double>(size * size, 0.0));
}

AttentionMatrix::AttentionMatrix(std::size_t size, std::vector<double> entries)
    : size_(size), entries_(std::move(entries)) {
  check_square(size_, entries_.size(), "AttentionMatrix");
  for (std::size_t i = 0; i < size_; ++i) {
    double* row = entries_.data() + i * size_;
    double sum = 0.0;
    for (std::size_t k = 0; k < size_; ++k) {
      const double v = row[k];
      if (!std::isfinite(v) || v < 0.0) {
        throw ValidationError("AttentionMatrix: invalid entry " +
                              std::to_string(v) + " at " +
                              index_string(size_, i * size_ + k));
      }
      sum += v;
    }
    const double deviation = std::abs(sum - 1.0);
    if (deviation >= kRenormalizeTolerance) {
      std::ostringstream msg;
      msg << "AttentionMatrix: row " << i << " sums to " << sum;
      throw ValidationError(msg.str());
    }
    if (sum != 1.0) {
      for (std::size_t k = 0; k < size_; ++k) row[k] /= sum;
    }
    for (std::size_t k = 0; k < size_; ++k) {
      if (row[k] > 1.0) row[k] = 1.0;
    }
  }
}

AttentionMatrix AttentionMatrix::identity(std::size_t size) {
  std::vector<double> e(size * size, 0.0);
  for (std::size_t i = 0; i < size; ++i) e[i * size + i] = 1.0;
  return AttentionMatrix(size, std::move(e));
}

AttentionMatrix AttentionMatrix::uniform(std::size_t size) {
  return AttentionMatrix(size, std::vector<double>(size * size, 1.0 / static_cast<double>(size)));
}

AttentionMatrix AttentionMatrix::causal_uniform(std::size_t size) {
  std::vector<double> e(size * size, 0.0);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t k = 0; k <= i; ++k) e[i * size + k] = 1.0 / static_cast<double>(i + 1);
  }
  return AttentionMatrix(size, std::move(e));
}

double AttentionMatrix::upper_mass() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < size_; ++i) {
    for (std::size_t k = i + 1; k < size_; ++k) worst = std::max(worst, entries_[i * size_ + k]);
  }
  return worst;
}

AttentionMatrix AttentionMatrix::permuted(std::span<const std::size_t> perm) const {
  if (perm.size() != size_) throw ValidationError("permuted: permutation size mismatch");
  std::vector<double> e(entries_.size());
  for (std::size_t i = 0; i < size_; ++i) {
    for (std::size_t k = 0; k < size_; ++k) {
      e[perm[i] * size_ + perm[k]] = entries_[i * size_ + k];
    }
  }
  AttentionMatrix out = *this;
  out.entries_ = std::move(e);
  return out;
}

AttentionStack::AttentionStack(std::size_t batch, std::size_t heads,
                               std::vector<AttentionMatrix> matrices)
    : AttentionStack(batch, heads, std::move(matrices), layered_slots(heads, heads)) {}

AttentionStack::AttentionStack(std::size_t batch, std::size_t heads,
                               std::vector<AttentionMatrix> matrices,
                               std::vector<HeadSlot> slots)
    : batch_(batch), heads_(heads), length_(0), matrices_(std::move(matrices)),
      slots_(std::move(slots)) {
  if (batch_ == 0 || heads_ == 0) throw ValidationError("AttentionStack: empty stack");
  if (matrices_.size() != batch_ * heads_) {
    throw ValidationError("AttentionStack: expected " + std::to_string(batch_ * heads_) +
                          " matrices, got " + std::to_string(matrices_.size()));
  }
  if (slots_.size() != heads_) throw ValidationError("AttentionStack: one slot per head required");
  length_ = matrices_.front().size();
  for (const auto& m : matrices_) {
    if (m.size() != length_) throw ValidationError("AttentionStack: matrices differ in length");
  }
}

std::vector<HeadSlot> AttentionStack::layered_slots(std::size_t heads,
                                                    std::size_t heads_per_layer) {
  if (heads_per_layer == 0 || heads % heads_per_layer != 0) {
    throw ValidationError("heads-per-layer " + std::to_string(heads_per_layer) +
                          " does not divide head count " + std::to_string(heads));
  }
  std::vector<HeadSlot> slots(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    slots[h] = {static_cast<int>(h / heads_per_layer), static_cast<int>(h % heads_per_layer)};
  }
  return slots;
}

AttentionMatrix softmax_rows(const ScoreMatrix& scores, bool causal) {
  const std::size_t n = scores.size();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = scores.row(i);
    const std::size_t width = causal ? i + 1 : n;
    const double peak = *std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(width));
    double* dst = out.data() + i * n;
    double sum = 0.0;
    for (std::size_t k = 0; k < width; ++k) {
      dst[k] = std::exp(row[k] - peak);
      sum += dst[k];
    }
    for (std::size_t k = 0; k < width; ++k) dst[k] /= sum;
  }
  return AttentionMatrix(n, std::move(out));
}

double distribution_entropy(std::span<const double> p) {
  double h = 0.0;
  for (const double v : p) {
    if (v >= kEntropyFloor) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

double attention_entropy_row(const AttentionMatrix& a, std::size_t i) {
  if (i >= a.size()) {
    throw ValidationError("attention_entropy_row: row " + std::to_string(i) +
                          " out of range for size " + std::to_string(a.size()));
  }
  return distribution_entropy(a.row(i));
}

double attention_entropy(const AttentionMatrix& a) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += distribution_entropy(a.row(i));
  return total / static_cast<double>(a.size());
}

}  // namespace saobp
