// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "saobp/toymodel.hpp"

namespace saobp::toy {

namespace {

// Seeds for the independent streams derived from ModelConfig::seed.
constexpr std::uint64_t kTrainStream = 0x5452414953ull;
constexpr std::uint64_t kEvalStream = 0x4556414c53ull;

bool same(const LayerProfile& a, const LayerProfile& b) {
  return a.layer == b.layer && a.gtd == b.gtd && a.indirect_entropy == b.indirect_entropy &&
         a.mean_entropy == b.mean_entropy && a.sparsity == b.sparsity;
}

bool same(const DiagnosticRow& a, const DiagnosticRow& b) {
  return a.layer == b.layer && a.head == b.head && a.gtd == b.gtd &&
         a.indirect_entropy == b.indirect_entropy && a.mean_entropy == b.mean_entropy &&
         a.sparsity == b.sparsity;
}

template <typename T>
bool same_all(const std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same(a[i], b[i])) return false;
  }
  return true;
}

}  // namespace

void TrainConfig::validate(const ModelConfig& model) const {
  if (steps < 0 || steps > 50'000) throw ValidationError("train config: steps must lie in [0, 50000]");
  if (batch_size < 1 || eval_batch < 1) throw ValidationError("train config: batch sizes must be positive");
  if (sequence_length > model.max_len) {
    throw ValidationError("train config: sequence_length exceeds model max_len");
  }
  if (!(learning_rate > 0.0) || !(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    throw ValidationError("train config: bad learning-rate schedule");
  }
  if (checkpoint_every < 1) throw ValidationError("train config: checkpoint_every must be positive");
  gtd.validate();
}

double TrainConfig::learning_rate_at(int step) const {
  const int warmup = std::max(1, static_cast<int>(std::lround(warmup_fraction * steps)));
  if (step <= warmup) return learning_rate * static_cast<double>(step) / warmup;
  const double progress = static_cast<double>(step - warmup) / std::max(1, steps - warmup);
  return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double Checkpoint::mean_gtd() const {
  double s = 0.0;
  for (const auto& h : heads) s += h.gtd;
  return heads.empty() ? 0.0 : s / static_cast<double>(heads.size());
}

double Checkpoint::mean_sparsity() const {
  double s = 0.0;
  for (const auto& h : heads) s += h.sparsity;
  return heads.empty() ? 0.0 : s / static_cast<double>(heads.size());
}

double Checkpoint::final_layer_entropy() const {
  return layers.empty() ? 0.0 : layers.back().mean_entropy;
}

bool operator==(const TrainLog& a, const TrainLog& b) {
  if (a.steps.size() != b.steps.size() || a.checkpoints.size() != b.checkpoints.size()) return false;
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    if (a.steps[i].step != b.steps[i].step || a.steps[i].loss != b.steps[i].loss) return false;
  }
  for (std::size_t i = 0; i < a.checkpoints.size(); ++i) {
    const auto& x = a.checkpoints[i];
    const auto& y = b.checkpoints[i];
    if (x.step != y.step || x.eval_loss != y.eval_loss ||
        x.final_layer_head_entropy != y.final_layer_head_entropy || !same_all(x.layers, y.layers) ||
        !same_all(x.heads, y.heads)) {
      return false;
    }
  }
  return true;
}

TrainingDiverged::TrainingDiverged(int step)
    : std::runtime_error("training diverged at step " + std::to_string(step)), step_(step) {}

Checkpoint evaluate(const ModelConfig& model, const ProjectionWeights& weights,
                    std::span<const Example> examples, const TrainConfig& train, int step) {
  const auto heads = static_cast<std::size_t>(model.layers * model.heads);
  std::vector<AttentionMatrix> matrices;
  matrices.reserve(examples.size() * heads);
  for (const auto& ex : examples) {
    auto result = forward(model, weights, ex.tokens);
    for (const auto& m : result.attention.matrices()) matrices.push_back(m);
  }
  const AttentionStack stack(examples.size(), heads, std::move(matrices),
                             AttentionStack::layered_slots(heads, static_cast<std::size_t>(model.heads)));
  StackProfile profile = profile_stack(stack, train.gtd, train.sparsity_epsilon);

  Checkpoint cp;
  cp.step = step;
  cp.eval_loss = loss_and_gradient(model, weights, examples, nullptr);
  cp.layers = std::move(profile.layers);
  cp.final_layer_head_entropy = std::move(profile.final_layer_head_entropy);
  cp.heads = std::move(profile.rows);
  return cp;
}

TrainResult train_toy(const ModelConfig& model, const TrainConfig& train,
                      const CheckpointCallback& on_checkpoint) {
  model.validate();
  train.validate(model);

  TrainResult result{{}, ProjectionWeights::initialize(model, model.seed)};
  ProjectionWeights& weights = result.weights;
  TaskSampler sampler(train.task, model.vocab, train.sequence_length, model.causal,
                      model.seed ^ kTrainStream);
  const auto eval_set = TaskSampler(train.task, model.vocab, train.sequence_length, model.causal,
                                    model.seed ^ kEvalStream)
                            .batch(train.eval_batch);

  auto checkpoint = [&](int step) {
    result.log.checkpoints.push_back(evaluate(model, weights, eval_set, train, step));
    if (on_checkpoint) on_checkpoint(result.log.checkpoints.back(), weights);
  };
  checkpoint(0);

  ProjectionWeights first_moment = ProjectionWeights::zeros(model);
  ProjectionWeights second_moment = ProjectionWeights::zeros(model);
  auto params = weights.tensors();
  auto m1 = first_moment.tensors();
  auto m2 = second_moment.tensors();
  ProjectionWeights grad;

  for (int step = 1; step <= train.steps; ++step) {
    const auto batch = sampler.batch(train.batch_size);
    double loss;
    try {
      loss = loss_and_gradient(model, weights, batch, &grad);
    } catch (const ValidationError&) {
      // Inputs were validated up front; a rejection here means the
      // activations overflowed.
      throw TrainingDiverged(step);
    }
    if (!std::isfinite(loss)) throw TrainingDiverged(step);
    result.log.steps.push_back({step, loss});

    auto grads = grad.tensors();
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads) norm_sq += g->squaredNorm();
    if (!std::isfinite(norm_sq)) throw TrainingDiverged(step);
    const double norm = std::sqrt(norm_sq);
    const double clip = (train.grad_clip > 0.0 && norm > train.grad_clip) ? train.grad_clip / norm : 1.0;

    const double lr = train.learning_rate_at(step);
    const double c1 = 1.0 - std::pow(train.adam_beta1, step);
    const double c2 = 1.0 - std::pow(train.adam_beta2, step);
    for (std::size_t t = 0; t < params.size(); ++t) {
      Matrix& p = *params[t].second;
      Matrix& a = *m1[t].second;
      Matrix& b = *m2[t].second;
      const Matrix g = *grads[t].second * clip;
      a = train.adam_beta1 * a + (1.0 - train.adam_beta1) * g;
      b = train.adam_beta2 * b + (1.0 - train.adam_beta2) * g.cwiseProduct(g);
      p.array() -= lr * (a.array() / c1) / ((b.array() / c2).sqrt() + train.adam_epsilon);
    }

    if (step % train.checkpoint_every == 0 || step == train.steps) {
      try {
        checkpoint(step);
      } catch (const ValidationError&) {
        throw TrainingDiverged(step);
      }
    }
  }
  return result;
}

}  // namespace saobp::toy
