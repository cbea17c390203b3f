// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "rng.hpp"
#include "saobp/toymodel.hpp"

namespace saobp::toy {

namespace {

constexpr double kLayerNormEpsilon = 1e-5;
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluCubic = 0.044715;

using MatrixMap = Eigen::Map<const Matrix>;

struct NormCache {
  Matrix normalized;        // (x - mean) * rstd
  Eigen::VectorXd rstd;     // per row
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  Matrix normalized(rows, cols);
  Eigen::VectorXd rstd(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    normalized.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix y = normalized.array().rowwise() * gain.row(0).array();
  y.rowwise() += bias.row(0);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const Matrix& gain,
                           Matrix& d_gain, Matrix& d_bias) {
  d_gain.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  d_bias.row(0) += dy.colwise().sum();
  const Matrix d_norm = dy.array().rowwise() * gain.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  const double cols = static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = d_norm.row(r).sum() / cols;
    const double mean_dn = d_norm.row(r).dot(cache.normalized.row(r)) / cols;
    dx.row(r) = cache.rstd(r) *
                (d_norm.row(r).array() - mean_d - cache.normalized.row(r).array() * mean_dn);
  }
  return dx;
}

double gelu(double u) {
  return 0.5 * u * (1.0 + std::tanh(kGeluScale * (u + kGeluCubic * u * u * u)));
}

double gelu_derivative(double u) {
  const double t = std::tanh(kGeluScale * (u + kGeluCubic * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * u * u);
}

struct HeadCache {
  AttentionMatrix probs;    // softmax output
  AttentionMatrix refined;  // what multiplies V
};

struct LayerCache {
  Matrix input;
  NormCache ln1;
  Matrix normed1;
  Matrix q, k, v;
  std::vector<HeadCache> heads;
  Matrix context;  // concatenated head outputs
  Matrix mid;      // input + attention block
  NormCache ln2;
  Matrix normed2;
  Matrix pre_act;
  Matrix act;
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Matrix final_input;
  NormCache final_norm;
  Matrix final_normed;
  Matrix logits;
};

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_len) {
    throw ValidationError("forward: sequence length " + std::to_string(tokens.size()) +
                          " exceeds max_len " + std::to_string(config.max_len));
  }
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    if (tokens[p] < 0 || tokens[p] >= config.vocab) {
      throw ValidationError("forward: token " + std::to_string(tokens[p]) + " at position " +
                            std::to_string(p) + " outside vocabulary");
    }
  }
}

void check_shapes(const ModelConfig& config, const ProjectionWeights& w) {
  const auto ok = [](const Matrix& m, int r, int c) { return m.rows() == r && m.cols() == c; };
  bool good = ok(w.token_embedding, config.vocab, config.hidden) &&
              ok(w.position_embedding, config.max_len, config.hidden) &&
              static_cast<int>(w.layers.size()) == config.layers &&
              ok(w.w_out, config.hidden, config.vocab) && ok(w.b_out, 1, config.vocab);
  for (const auto& l : w.layers) {
    good = good && ok(l.wq, config.hidden, config.hidden) && ok(l.w1, config.hidden, config.ffn) &&
           ok(l.w2, config.ffn, config.hidden);
  }
  if (!good) throw ValidationError("weights do not match model config");
}

ForwardCache run_forward(const ModelConfig& config, const ProjectionWeights& w,
                         std::span<const int> tokens) {
  check_tokens(config, tokens);
  const int len = static_cast<int>(tokens.size());
  const int dh = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(len, config.hidden);
  for (int p = 0; p < len; ++p) {
    x.row(p) = w.token_embedding.row(tokens[p]) + w.position_embedding.row(p);
  }

  cache.layers.resize(static_cast<std::size_t>(config.layers));
  for (int l = 0; l < config.layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
    LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
    c.input = x;
    c.normed1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias, &c.ln1);
    c.q = c.normed1 * lw.wq;
    c.q.rowwise() += lw.bq.row(0);
    c.k = c.normed1 * lw.wk;
    c.k.rowwise() += lw.bk.row(0);
    c.v = c.normed1 * lw.wv;
    c.v.rowwise() += lw.bv.row(0);

    c.context.resize(len, config.hidden);
    c.heads.reserve(static_cast<std::size_t>(config.heads));
    for (int h = 0; h < config.heads; ++h) {
      const auto qh = c.q.middleCols(h * dh, dh);
      const auto kh = c.k.middleCols(h * dh, dh);
      const Matrix scores = (qh * kh.transpose()) * scale;
      AttentionMatrix probs =
          softmax_rows(ScoreMatrix(static_cast<std::size_t>(len),
                                   std::vector<double>(scores.data(), scores.data() + scores.size())),
                       config.causal);
      AttentionMatrix refined = config.refinement
                                    ? refine(probs, *config.refinement, config.causal).attention
                                    : probs;
      const MatrixMap r(refined.data().data(), len, len);
      c.context.middleCols(h * dh, dh) = r * c.v.middleCols(h * dh, dh);
      c.heads.push_back({std::move(probs), std::move(refined)});
    }
    Matrix attn_out = c.context * lw.wo;
    attn_out.rowwise() += lw.bo.row(0);
    c.mid = x + attn_out;

    c.normed2 = layer_norm(c.mid, lw.ln2_gain, lw.ln2_bias, &c.ln2);
    c.pre_act = c.normed2 * lw.w1;
    c.pre_act.rowwise() += lw.b1.row(0);
    c.act = c.pre_act.unaryExpr([](double u) { return gelu(u); });
    Matrix ffn_out = c.act * lw.w2;
    ffn_out.rowwise() += lw.b2.row(0);
    x = c.mid + ffn_out;
  }
  cache.final_input = x;
  cache.final_normed = layer_norm(x, w.final_gain, w.final_bias, &cache.final_norm);
  cache.logits = cache.final_normed * w.w_out;
  cache.logits.rowwise() += w.b_out.row(0);
  return cache;
}

// Accumulates gradients of sum_targets(scale * CE) into `g`; returns the
// summed (unscaled) cross-entropy.
double run_backward(const ModelConfig& config, const ProjectionWeights& w, const ForwardCache& cache,
                    std::span<const std::pair<int, int>> targets, double scale, ProjectionWeights* g) {
  const int len = static_cast<int>(cache.tokens.size());
  const int dh = config.head_dim();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix d_logits = Matrix::Zero(len, config.vocab);
  double total = 0.0;
  for (const auto& [pos, target] : targets) {
    const auto row = cache.logits.row(pos);
    const double peak = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - peak).exp();
    const double z = e.sum();
    total += std::log(z) + peak - row(target);
    d_logits.row(pos) += scale * (e / z);
    d_logits(pos, target) -= scale;
  }
  if (!g) return total;

  g->w_out += cache.final_normed.transpose() * d_logits;
  g->b_out.row(0) += d_logits.colwise().sum();
  Matrix dx = layer_norm_backward(d_logits * w.w_out.transpose(), cache.final_norm, w.final_gain,
                                  g->final_gain, g->final_bias);

  for (int l = config.layers - 1; l >= 0; --l) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
    LayerWeights& lg = g->layers[static_cast<std::size_t>(l)];
    const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];

    // Feed-forward block.
    lg.w2 += c.act.transpose() * dx;
    lg.b2.row(0) += dx.colwise().sum();
    Matrix d_act = dx * lw.w2.transpose();
    for (Eigen::Index r = 0; r < d_act.rows(); ++r) {
      for (Eigen::Index col = 0; col < d_act.cols(); ++col) {
        d_act(r, col) *= gelu_derivative(c.pre_act(r, col));
      }
    }
    lg.w1 += c.normed2.transpose() * d_act;
    lg.b1.row(0) += d_act.colwise().sum();
    Matrix d_mid = dx + layer_norm_backward(d_act * lw.w1.transpose(), c.ln2, lw.ln2_gain,
                                            lg.ln2_gain, lg.ln2_bias);

    // Attention block.
    lg.wo += c.context.transpose() * d_mid;
    lg.bo.row(0) += d_mid.colwise().sum();
    const Matrix d_context = d_mid * lw.wo.transpose();
    Matrix dq(len, config.hidden), dk(len, config.hidden), dv(len, config.hidden);
    for (int h = 0; h < config.heads; ++h) {
      const HeadCache& hc = c.heads[static_cast<std::size_t>(h)];
      const MatrixMap refined(hc.refined.data().data(), len, len);
      const MatrixMap probs(hc.probs.data().data(), len, len);
      const auto d_out = d_context.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = refined.transpose() * d_out;
      const Matrix d_refined = d_out * c.v.middleCols(h * dh, dh).transpose();

      Matrix d_probs;
      if (config.refinement) {
        const auto grad = refine_backward(
            hc.probs, hc.refined, *config.refinement, config.causal,
            std::span<const double>(d_refined.data(), static_cast<std::size_t>(d_refined.size())),
            config.stop_message_gradient);
        d_probs = MatrixMap(grad.data(), len, len);
      } else {
        d_probs = d_refined;
      }
      Matrix d_scores(len, len);
      for (int r = 0; r < len; ++r) {
        const double inner = d_probs.row(r).dot(probs.row(r));
        d_scores.row(r) = probs.row(r).array() * (d_probs.row(r).array() - inner);
      }
      d_scores *= score_scale;
      dq.middleCols(h * dh, dh) = d_scores * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = d_scores.transpose() * c.q.middleCols(h * dh, dh);
    }
    lg.wq += c.normed1.transpose() * dq;
    lg.wk += c.normed1.transpose() * dk;
    lg.wv += c.normed1.transpose() * dv;
    lg.bq.row(0) += dq.colwise().sum();
    lg.bk.row(0) += dk.colwise().sum();
    lg.bv.row(0) += dv.colwise().sum();
    const Matrix d_normed1 = dq * lw.wq.transpose() + dk * lw.wk.transpose() + dv * lw.wv.transpose();
    dx = d_mid + layer_norm_backward(d_normed1, c.ln1, lw.ln1_gain, lg.ln1_gain, lg.ln1_bias);
  }

  for (int p = 0; p < len; ++p) {
    g->token_embedding.row(cache.tokens[static_cast<std::size_t>(p)]) += dx.row(p);
    g->position_embedding.row(p) += dx.row(p);
  }
  return total;
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || hidden < 1 || ffn < 1 || max_len < 1) {
    throw ValidationError("model config: all dimensions must be at least 1");
  }
  if (vocab < kFirstContentToken + 2) {
    throw ValidationError("model config: vocab must be at least " + std::to_string(kFirstContentToken + 2));
  }
  if (hidden % heads != 0) {
    throw ValidationError("model config: hidden " + std::to_string(hidden) +
                          " not divisible by heads " + std::to_string(heads));
  }
  if (refinement) {
    refinement->validate();
    if (causal && refinement->kind == FactorKind::ElemMul) {
      throw ValidationError("model config: ElemMul refinement has no causal form");
    }
  }
}

ProjectionWeights ProjectionWeights::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.hidden;
  ProjectionWeights w;
  w.token_embedding = Matrix::Zero(config.vocab, d);
  w.position_embedding = Matrix::Zero(config.max_len, d);
  w.layers.resize(static_cast<std::size_t>(config.layers));
  for (auto& l : w.layers) {
    l.ln1_gain = Matrix::Zero(1, d);
    l.ln1_bias = Matrix::Zero(1, d);
    l.wq = l.wk = l.wv = l.wo = Matrix::Zero(d, d);
    l.bq = l.bk = l.bv = l.bo = Matrix::Zero(1, d);
    l.ln2_gain = Matrix::Zero(1, d);
    l.ln2_bias = Matrix::Zero(1, d);
    l.w1 = Matrix::Zero(d, config.ffn);
    l.b1 = Matrix::Zero(1, config.ffn);
    l.w2 = Matrix::Zero(config.ffn, d);
    l.b2 = Matrix::Zero(1, d);
  }
  w.final_gain = Matrix::Zero(1, d);
  w.final_bias = Matrix::Zero(1, d);
  w.w_out = Matrix::Zero(d, config.vocab);
  w.b_out = Matrix::Zero(1, config.vocab);
  return w;
}

ProjectionWeights ProjectionWeights::initialize(const ModelConfig& config, std::uint64_t seed) {
  ProjectionWeights w = zeros(config);
  detail::SplitMix64 rng(seed);
  const auto fill = [&rng](Matrix& m, double fan_in) {
    const double bound = 1.0 / std::sqrt(fan_in);
    for (Eigen::Index e = 0; e < m.size(); ++e) m.data()[e] = rng.uniform(-bound, bound);
  };
  const double d = config.hidden;
  fill(w.token_embedding, 1.0);
  fill(w.position_embedding, 1.0);
  for (auto& l : w.layers) {
    l.ln1_gain.setOnes();
    l.ln2_gain.setOnes();
    fill(l.wq, d);
    fill(l.wk, d);
    fill(l.wv, d);
    fill(l.wo, d);
    fill(l.w1, d);
    fill(l.w2, config.ffn);
  }
  w.final_gain.setOnes();
  fill(w.w_out, d);
  return w;
}

std::vector<std::pair<std::string, Matrix*>> ProjectionWeights::tensors() {
  std::vector<std::pair<std::string, Matrix*>> out{{"token_embedding", &token_embedding},
                                                   {"position_embedding", &position_embedding}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    LayerWeights& l = layers[i];
    out.insert(out.end(), {{p + "ln1_gain", &l.ln1_gain}, {p + "ln1_bias", &l.ln1_bias},
                           {p + "wq", &l.wq},             {p + "bq", &l.bq},
                           {p + "wk", &l.wk},             {p + "bk", &l.bk},
                           {p + "wv", &l.wv},             {p + "bv", &l.bv},
                           {p + "wo", &l.wo},             {p + "bo", &l.bo},
                           {p + "ln2_gain", &l.ln2_gain}, {p + "ln2_bias", &l.ln2_bias},
                           {p + "w1", &l.w1},             {p + "b1", &l.b1},
                           {p + "w2", &l.w2},             {p + "b2", &l.b2}});
  }
  out.insert(out.end(), {{"final_gain", &final_gain},
                         {"final_bias", &final_bias},
                         {"w_out", &w_out},
                         {"b_out", &b_out}});
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> ProjectionWeights::tensors() const {
  auto mutable_view = const_cast<ProjectionWeights*>(this)->tensors();
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.reserve(mutable_view.size());
  for (auto& [name, ptr] : mutable_view) out.emplace_back(std::move(name), ptr);
  return out;
}

std::size_t ProjectionWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

ForwardResult forward(const ModelConfig& config, const ProjectionWeights& weights,
                      std::span<const int> tokens) {
  config.validate();
  check_shapes(config, weights);
  ForwardCache cache = run_forward(config, weights, tokens);
  std::vector<AttentionMatrix> matrices;
  for (auto& layer : cache.layers) {
    for (auto& head : layer.heads) matrices.push_back(std::move(head.refined));
  }
  const auto heads = static_cast<std::size_t>(config.layers * config.heads);
  AttentionStack stack(1, heads, std::move(matrices),
                       AttentionStack::layered_slots(heads, static_cast<std::size_t>(config.heads)));
  return {std::move(cache.logits), std::move(stack)};
}

double loss_and_gradient(const ModelConfig& config, const ProjectionWeights& weights,
                         std::span<const Example> batch, ProjectionWeights* grad) {
  config.validate();
  check_shapes(config, weights);
  std::size_t target_count = 0;
  for (const auto& ex : batch) target_count += ex.targets.size();
  if (target_count == 0) throw ValidationError("loss: batch has no targets");
  if (grad) *grad = ProjectionWeights::zeros(config);
  const double scale = 1.0 / static_cast<double>(target_count);
  double total = 0.0;
  for (const auto& ex : batch) {
    const ForwardCache cache = run_forward(config, weights, ex.tokens);
    total += run_backward(config, weights, cache, ex.targets, scale, grad);
  }
  return total * scale;
}

double grad_check(const ModelConfig& config, double epsilon, const GradCheckOptions& options) {
  config.validate();
  if (!(epsilon >= 1e-6 && epsilon <= 1e-4)) {
    throw ValidationError("grad_check: epsilon must lie in [1e-6, 1e-4]");
  }
  if (options.sequence_length > config.max_len) {
    throw ValidationError("grad_check: sequence length exceeds max_len");
  }
  ProjectionWeights weights = ProjectionWeights::initialize(config, config.seed);
  // Randomize the layer-norm affine parameters too so that their gradients
  // are exercised away from the identity.
  detail::SplitMix64 rng(options.seed);
  for (auto& [name, m] : weights.tensors()) {
    if (name.find("gain") != std::string::npos || name.find("bias") != std::string::npos ||
        name.front() == 'b' || name.find(".b") != std::string::npos) {
      for (Eigen::Index e = 0; e < m->size(); ++e) m->data()[e] += rng.uniform(-0.2, 0.2);
    }
  }

  TaskSampler sampler(Task::MaskedCopy, config.vocab, options.sequence_length, config.causal,
                      options.seed);
  const auto batch = sampler.batch(options.batch);

  ProjectionWeights grad;
  loss_and_gradient(config, weights, batch, &grad);

  double worst = 0.0;
  auto grad_tensors = grad.tensors();
  auto weight_tensors = weights.tensors();
  for (std::size_t t = 0; t < weight_tensors.size(); ++t) {
    Matrix& m = *weight_tensors[t].second;
    const Matrix& gm = *grad_tensors[t].second;
    for (int s = 0; s < options.samples_per_tensor; ++s) {
      const auto e = static_cast<Eigen::Index>(rng.next() % static_cast<std::uint64_t>(m.size()));
      const double saved = m.data()[e];
      m.data()[e] = saved + epsilon;
      const double up = loss_and_gradient(config, weights, batch, nullptr);
      m.data()[e] = saved - epsilon;
      const double down = loss_and_gradient(config, weights, batch, nullptr);
      m.data()[e] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = gm.data()[e];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), options.floor});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace saobp::toy
