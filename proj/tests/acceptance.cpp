// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion with its measured
// numbers and wall time. Criteria 9 and 10 are empirical training outcomes;
// they are reported but do not affect the exit status.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "graph_support.hpp"
#include "saobp/cli.hpp"
#include "saobp/core.hpp"
#include "saobp/diagnostics.hpp"
#include "saobp/graph.hpp"
#include "saobp/io.hpp"
#include "saobp/refine.hpp"
#include "saobp/toymodel.hpp"
#include "test_support.hpp"

using namespace saobp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0 = no runtime bound
  bool gating;
  std::function<Outcome()> body;
};

std::string fmt(double v) { return io::format_double(v); }

// Mixed generators: dense softmax at several temperatures and sparse rows.
AttentionMatrix any_attention(std::size_t n, std::mt19937_64& gen, bool causal) {
  const int pick = static_cast<int>(gen() % 4);
  if (pick == 3 && !causal) return testing::random_sparse_attention(n, gen);
  return testing::random_attention(n, gen, causal, pick == 0 ? 0.5 : pick == 1 ? 3.0 : 12.0);
}

Outcome lambda_zero_identity() {
  std::mt19937_64 gen(101);
  double worst = 0.0;
  for (std::size_t n : {2u, 8u, 32u, 128u}) {
    for (int t = 0; t < 100; ++t) {
      const auto a = any_attention(n, gen, false);
      for (auto spec : {FactorSpec::high(0.0), FactorSpec::low(0.0)})
        worst = std::max(worst, testing::max_abs_diff(refine_bp(a, spec).attention.data(), a.data()));
    }
  }
  return {worst <= 1e-12, "max |refined - input| = " + fmt(worst) + " (bound 1e-12)"};
}

Outcome oracle_equivalence() {
  std::ostringstream out, err;
  double worst = 0.0;
  bool ok = true;
  for (std::size_t n : {4u, 8u, 16u}) {
    cli::OracleCheckOptions o;
    o.size = n;
    o.trials = 100;
    o.lambdas = {0.05, 0.2, 1.0};
    ok = cli::cmd_oracle_check(o, out, err) == cli::kSuccess && ok;
    for (double lambda : o.lambdas)
      for (auto kind : {FactorKind::High, FactorKind::Low})
        for (bool masked : {false, true})
          worst = std::max(worst, cli::oracle_discrepancy(n, 100, lambda, kind, masked, o.seed).max_discrepancy);
  }
  return {ok && worst < 1e-10, "max relative discrepancy = " + fmt(worst) + " (bound 1e-10)"};
}

Outcome row_stochasticity() {
  std::mt19937_64 gen(103);
  double worst_sum = 0.0;
  double min_entry = 1.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + gen() % 31;
    const auto dense = any_attention(n, gen, false);
    const auto causal = testing::random_attention(n, gen, true, 6.0 * testing::unit(gen));
    const double lambda = 2.0 * testing::unit(gen);
    const std::vector<AttentionMatrix> outs{
        refine_bp(dense, FactorSpec::high(lambda)).attention, refine_bp(dense, FactorSpec::low(lambda)).attention,
        refine_elemmul(dense).attention, refine_bp_masked(causal, FactorSpec::high(lambda)).attention,
        refine_bp_masked(causal, FactorSpec::low(lambda)).attention};
    for (const auto& m : outs) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (double v : m.row(i)) {
          s += v;
          min_entry = std::min(min_entry, v);
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
  }
  return {worst_sum <= 1e-9 && min_entry >= 0.0,
          "max |row sum - 1| = " + fmt(worst_sum) + ", min entry = " + fmt(min_entry) + " over 5000 outputs"};
}

Outcome gtd_fixture() {
  const double c = 0.9 + 0.81 + 0.729;
  const double expect = c * c / (1.0 + c * c);
  const double u = gtd(AttentionMatrix::uniform(16));
  const double i = gtd(AttentionMatrix::identity(16));
  const double err = std::max(std::abs(u - expect), std::abs(i - expect));
  return {err <= 1e-9, "uniform " + fmt(u) + ", identity " + fmt(i) + ", c^2/(1+c^2) = " + fmt(expect)};
}

Outcome entropy_fixtures() {
  bool ok = true;
  double worst = 0.0;
  for (std::size_t n : {2u, 10u, 64u}) {
    ok = ok && attention_entropy(AttentionMatrix::identity(n)) == 0.0;
    ok = ok && indirect_entropy(global_matrix(AttentionMatrix::identity(n))) == 0.0;
    const double ln = std::log(static_cast<double>(n));
    const double h = std::abs(attention_entropy(AttentionMatrix::uniform(n)) - ln);
    const double g = std::abs(indirect_entropy(global_matrix(AttentionMatrix::uniform(n))) - ln);
    ok = ok && h <= 1e-12 && g <= 1e-9;
    worst = std::max({worst, h, g});
  }
  return {ok, "identity entropies exactly 0; uniform max |H - ln L| = " + fmt(worst)};
}

Outcome graph_fixtures() {
  using Edges = std::vector<std::pair<std::size_t, std::size_t>>;
  const auto k4 = TokenGraph::from_edges(4, Edges{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}});
  const auto path = TokenGraph::from_edges(3, Edges{{0, 1}, {1, 2}});
  const auto k4_minus = TokenGraph::from_edges(4, Edges{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}});
  const auto star = TokenGraph::from_edges(4, Edges{{0, 1}, {0, 2}, {0, 3}});
  const double cc_minus = clustering_coefficient(k4_minus);
  bool ok = clustering_coefficient(k4) == 1.0 && clustering_coefficient(path) == 0.0 &&
            std::abs(cc_minus - 5.0 / 6.0) < 1e-15 &&
            std::abs(betweenness_centrality(path) - 1.0 / 3.0) < 1e-15 &&
            std::abs(betweenness_centrality(star) - 0.75) < 1e-15;
  std::mt19937_64 gen(106);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto g = testing::random_graph(1 + gen() % 8, 0.2 + 0.6 * testing::unit(gen), gen);
    worst = std::max(worst, testing::max_abs_diff(node_betweenness(g), testing::brute_force_betweenness(g)));
  }
  ok = ok && worst < 1e-12;
  return {ok, "CC(K4 minus edge) = " + fmt(cc_minus) +
                  " (5/6 by pair enumeration; nodes on the missing edge score 1, the others 2/3), "
                  "Brandes vs enumeration max diff = " + fmt(worst)};
}

Outcome gradient_check() {
  toy::ModelConfig m;
  m.hidden = 16;
  m.ffn = 32;
  m.vocab = 12;
  m.max_len = 8;
  double worst = 0.0;
  std::string detail;
  for (auto spec : {FactorSpec::high(0.2), FactorSpec::low(0.2), FactorSpec::elemmul()}) {
    m.refinement = spec;
    const double e = toy::grad_check(m, 1e-5);
    worst = std::max(worst, e);
    detail += std::string(to_string(spec.kind)) + "=" + fmt(e) + " ";
  }
  return {worst < 1e-4, detail + "(bound 1e-4)"};
}

Outcome masked_structure() {
  std::mt19937_64 gen(108);
  double upper = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto a = testing::random_attention(2 + gen() % 40, gen, true, 1.0 + 5.0 * testing::unit(gen));
    for (auto spec : {FactorSpec::high(0.2), FactorSpec::low(0.2), FactorSpec::high(1.0)})
      upper = std::max(upper, refine_bp_masked(a, spec).attention.upper_mass());
  }
  return {upper == 0.0, "max mass above diagonal = " + fmt(upper)};
}

struct ArmResult {
  double entropy, gtd, sparsity, eval_loss;
};

std::vector<std::pair<ArmResult, ArmResult>>& training_runs() {
  static std::vector<std::pair<ArmResult, ArmResult>> runs;
  if (!runs.empty()) return runs;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    toy::ModelConfig m;  // 2 layers, 2 heads, hidden 32
    m.seed = seed;
    toy::TrainConfig t;
    t.task = toy::Task::LongRangeMatch;
    t.steps = 3000;
    t.sequence_length = 32;
    t.learning_rate = 1e-3;
    t.checkpoint_every = 3000;
    auto arm = [&](std::optional<FactorSpec> spec) {
      m.refinement = spec;
      const auto cp = toy::train_toy(m, t).log.checkpoints.back();
      return ArmResult{cp.final_layer_entropy(), cp.mean_gtd(), cp.mean_sparsity(), cp.eval_loss};
    };
    const ArmResult base = arm(std::nullopt);
    runs.emplace_back(base, arm(FactorSpec::high(0.2)));
  }
  return runs;
}

Outcome entropy_collapse_direction() {
  int entropy_wins = 0, gtd_wins = 0;
  std::string detail;
  int seed = 1;
  for (const auto& [b, r] : training_runs()) {
    entropy_wins += r.entropy >= b.entropy;
    gtd_wins += r.gtd > b.gtd;
    detail += "\n      seed " + std::to_string(seed++) + ": H " + fmt(b.entropy) + " -> " + fmt(r.entropy) + ", GTD " +
              fmt(b.gtd) + " -> " + fmt(r.gtd) + ", eval loss " + fmt(b.eval_loss) + " -> " + fmt(r.eval_loss);
  }
  return {entropy_wins >= 2 && gtd_wins >= 2, "entropy >= baseline in " + std::to_string(entropy_wins) +
                                                  "/3 seeds, GTD > baseline in " + std::to_string(gtd_wins) +
                                                  "/3 (baseline -> refined)" + detail};
}

Outcome sparsity_direction() {
  int wins = 0;
  std::string detail;
  for (const auto& [b, r] : training_runs()) {
    wins += r.sparsity <= b.sparsity;
    detail += " " + fmt(b.sparsity) + "->" + fmt(r.sparsity);
  }
  return {wins >= 2, "sparsity <= baseline in " + std::to_string(wins) + "/3 seeds:" + detail};
}

Outcome train_determinism() {
  const auto root = fs::temp_directory_path() / "saobp_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  io::write_text_file(root / "config.json", R"({
    "model": {"hidden": 16, "ffn": 32, "max_len": 16, "seed": 11, "refinement": {"variant": "high", "lambda": 0.2}},
    "train": {"task": "long-range-match", "steps": 40, "sequence_length": 16, "checkpoint_every": 20}
  })");
  std::ostringstream out, err;
  const bool ran = cli::cmd_train({root / "config.json", root / "a"}, out, err) == cli::kSuccess &&
                   cli::cmd_train({root / "config.json", root / "b"}, out, err) == cli::kSuccess;
  bool same = ran;
  std::size_t bytes = 0;
  for (const char* f : {"train_log.csv", "train_log.json", "checkpoints.csv"}) {
    if (!ran) break;
    const auto x = io::read_text_file(root / "a" / f);
    same = same && x == io::read_text_file(root / "b" / f);
    bytes += x.size();
  }
  return {same, ran ? std::to_string(bytes) + " bytes of TrainLog files compared" : "cmd_train failed: " + err.str()};
}

Outcome permutation_invariance() {
  std::mt19937_64 gen(112);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + gen() % 30;
    const auto a = any_attention(n, gen, false);
    const auto p = a.permuted(testing::random_permutation(n, gen));
    const double tau = t % 2 == 0 ? kDefaultTau : 0.5 / static_cast<double>(n);
    const auto ga = project(a, tau), gp = project(p, tau);
    worst = std::max({worst, std::abs(gtd(a) - gtd(p)), std::abs(attention_entropy(a) - attention_entropy(p)),
                      std::abs(clustering_coefficient(ga) - clustering_coefficient(gp)),
                      std::abs(betweenness_centrality(ga) - betweenness_centrality(gp))});
  }
  return {worst <= 1e-12, "max deviation over gtd/entropy/CC/BC = " + fmt(worst)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "lambda=0 identity", 1.0, true, lambda_zero_identity},
      {2, "oracle equivalence", 10.0, true, oracle_equivalence},
      {3, "row-stochasticity conservation", 5.0, true, row_stochasticity},
      {4, "analytic GTD fixture", 0.0, true, gtd_fixture},
      {5, "entropy fixtures", 0.0, true, entropy_fixtures},
      {6, "graph-metric fixtures", 5.0, true, graph_fixtures},
      {7, "gradient check", 30.0, true, gradient_check},
      {8, "masked-variant structure", 0.0, true, masked_structure},
      {9, "entropy-collapse direction (training)", 600.0, false, entropy_collapse_direction},
      {10, "sparsity direction (training)", 0.0, false, sparsity_direction},
      {11, "train determinism", 0.0, true, train_determinism},
      {12, "permutation invariance", 0.0, true, permutation_invariance},
  };
  int passed = 0;
  bool gating_ok = true;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.body();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_seconds == 0.0 || seconds < c.budget_seconds;
    const bool pass = o.pass && in_time;
    passed += pass;
    if (!pass && c.gating) gating_ok = false;
    std::printf("[%s] %2d %s: %s (%.2f s%s)%s\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), seconds,
                in_time ? "" : ", over budget", !pass && !c.gating ? " [non-gating]" : "");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", passed, criteria.size());
  return gating_ok ? 0 : 1;
}
