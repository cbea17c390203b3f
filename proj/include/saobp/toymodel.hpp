// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm transformer encoder (optionally causal) with an attention
// refinement hook after every softmax, hand-written backpropagation, a
// finite-difference gradient check, and a deterministic trainer on
// synthetic sequence tasks.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "saobp/core.hpp"
#include "saobp/diagnostics.hpp"
#include "saobp/refine.hpp"

namespace saobp::toy {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int layers = 2;
  int heads = 2;
  int hidden = 32;
  int ffn = 64;
  int vocab = 16;
  int max_len = 32;
  bool causal = false;
  std::optional<FactorSpec> refinement;
  /// Treat refinement messages as constants in the backward pass.
  bool stop_message_gradient = false;
  std::uint64_t seed = 1;

  void validate() const;
  int head_dim() const { return hidden / heads; }
};

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix wq, wk, wv, wo;
  Matrix bq, bk, bv, bo;
  Matrix ln2_gain, ln2_bias;
  Matrix w1, b1, w2, b2;
};

/// All trainable tensors. Vectors are stored as 1 x n matrices.
struct ProjectionWeights {
  Matrix token_embedding;     // vocab x hidden
  Matrix position_embedding;  // max_len x hidden
  std::vector<LayerWeights> layers;
  Matrix final_gain, final_bias;
  Matrix w_out, b_out;  // hidden x vocab, 1 x vocab

  static ProjectionWeights zeros(const ModelConfig& config);
  /// Symmetric uniform in +-1/sqrt(fan_in); layer-norm gains 1, biases 0.
  static ProjectionWeights initialize(const ModelConfig& config, std::uint64_t seed);

  /// Stable (name, tensor) enumeration used by the optimizer, gradient
  /// check and checkpoint files.
  std::vector<std::pair<std::string, Matrix*>> tensors();
  std::vector<std::pair<std::string, const Matrix*>> tensors() const;
  std::size_t parameter_count() const;
};

struct ForwardResult {
  Matrix logits;  // L x vocab
  /// Batch 1, one head per (layer, head); the refined matrices when
  /// refinement is configured.
  AttentionStack attention;
};

ForwardResult forward(const ModelConfig& config, const ProjectionWeights& weights,
                      std::span<const int> tokens);

/// A training sequence with (position, target token) supervision pairs.
struct Example {
  std::vector<int> tokens;
  std::vector<std::pair<int, int>> targets;
};

/// Mean cross-entropy over every target of the batch. When `grad` is given
/// it is overwritten with dLoss/dWeights.
double loss_and_gradient(const ModelConfig& config, const ProjectionWeights& weights,
                         std::span<const Example> batch, ProjectionWeights* grad);

struct GradCheckOptions {
  int sequence_length = 8;
  int batch = 2;
  int samples_per_tensor = 3;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 7;
};

/// Compares analytic gradients of the masked-copy loss against central
/// differences on a sampled subset of weights. Returns the max relative
/// error.
double grad_check(const ModelConfig& config, double epsilon, const GradCheckOptions& options = {});

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class Task { MaskedCopy, LongRangeMatch };

std::string_view to_string(Task task);
/// "masked-copy" or "long-range-match".
Task parse_task(std::string_view name);

inline constexpr int kClsToken = 0;
inline constexpr int kMaskToken = 1;
inline constexpr int kNoToken = 2;
inline constexpr int kYesToken = 3;
inline constexpr int kFirstContentToken = 4;

/// Deterministic generator of task examples.
///
/// masked-copy: the second half of the sequence repeats the first half;
/// about 15% of positions are replaced by a mask token and must be
/// recovered (second-half positions only when causal).
///
/// long-range-match: position 0 holds a CLS token, the rest are random
/// content tokens; the label (yes/no) says whether position 1 and the last
/// position carry the same token. It is read at CLS, or at the last
/// position for causal models.
class TaskSampler {
 public:
  TaskSampler(Task task, int vocab, int sequence_length, bool causal, std::uint64_t seed);

  Example next();
  std::vector<Example> batch(int count);

 private:
  Task task_;
  int vocab_;
  int length_;
  bool causal_;
  std::uint64_t state_;

  std::uint64_t draw();
  int uniform_int(int lo, int hi);  // inclusive
  double uniform01();
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  Task task = Task::MaskedCopy;
  int steps = 1000;
  int batch_size = 8;
  int sequence_length = 32;
  double learning_rate = 3e-4;
  double warmup_fraction = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double grad_clip = 1.0;
  int checkpoint_every = 500;
  int eval_batch = 16;
  GtdConfig gtd;
  double sparsity_epsilon = 1e-3;

  void validate(const ModelConfig& model) const;
  /// Warmup then cosine decay to zero.
  double learning_rate_at(int step) const;
};

struct StepRecord {
  int step = 0;
  double loss = 0.0;
};

struct Checkpoint {
  int step = 0;
  double eval_loss = 0.0;
  std::vector<LayerProfile> layers;
  std::vector<double> final_layer_head_entropy;
  std::vector<DiagnosticRow> heads;

  double mean_gtd() const;
  double mean_sparsity() const;
  double final_layer_entropy() const;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<Checkpoint> checkpoints;

  friend bool operator==(const TrainLog&, const TrainLog&);
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int step);
  int step() const { return step_; }

 private:
  int step_;
};

struct TrainResult {
  TrainLog log;
  ProjectionWeights weights;
};

/// Called after each checkpoint with the weights at that point.
using CheckpointCallback = std::function<void(const Checkpoint&, const ProjectionWeights&)>;

/// Deterministic given config.seed. Throws TrainingDiverged when a step
/// produces a non-finite loss.
TrainResult train_toy(const ModelConfig& model, const TrainConfig& train,
                      const CheckpointCallback& on_checkpoint = {});

/// Diagnostics of the model's attention on `examples`.
Checkpoint evaluate(const ModelConfig& model, const ProjectionWeights& weights,
                    std::span<const Example> examples, const TrainConfig& train, int step);

}  // namespace saobp::toy
