// SPDX-License-Identifier: Apache-2.0

#include "saobp/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "saobp/diagnostics.hpp"
#include "saobp/graph.hpp"
#include "saobp/io.hpp"
#include "saobp/refine.hpp"

namespace saobp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const toy::TrainingDiverged& e) {
    err << "error: " << e.what() << "\n";
    return kInternalError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternalError;
  }
}

void emit(const std::optional<fs::path>& path, const std::string& text, std::ostream& out) {
  if (path) {
    io::write_text_file(*path, text);
  } else {
    out << text;
  }
}

bool looks_like_json(const fs::path& path) {
  const std::string head = io::read_text_file(path).substr(0, 4);
  return head != std::string(io::kMagic, 4);
}

double random_unit(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

AttentionMatrix random_attention(std::size_t n, bool causal, std::mt19937_64& gen) {
  std::vector<double> scores(n * n);
  for (auto& s : scores) s = 6.0 * random_unit(gen) - 3.0;
  return softmax_rows(ScoreMatrix(n, std::move(scores)), causal);
}

std::vector<HeadSlot> read_layout(const fs::path& path, std::size_t heads) {
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("layout file: ") + e.what());
  }
  if (!j.is_array() || j.size() != heads) {
    throw ValidationError("layout file must be an array of " + std::to_string(heads) + " [layer, head] pairs");
  }
  std::vector<HeadSlot> slots;
  for (const auto& entry : j) {
    if (!entry.is_array() || entry.size() != 2) throw ValidationError("layout entries must be [layer, head]");
    slots.push_back({entry[0].get<int>(), entry[1].get<int>()});
  }
  return slots;
}

AttentionStack load_stack(const fs::path& input, std::size_t heads_per_layer,
                          const std::optional<fs::path>& layout) {
  const io::Tensor t = io::read_tensor(input);
  if (layout) {
    const std::size_t heads = t.shape.size() == 4 ? t.shape[1] : 1;
    return io::to_stack(t, read_layout(*layout, heads));
  }
  return io::to_stack(t, heads_per_layer);
}

std::string correlation_line(const char* metric, std::span<const double> gtds, std::span<const double> values) {
  std::ostringstream line;
  line << "# pearson metric=" << metric;
  try {
    const CorrelationResult c = pearson(gtds, values);
    line << " r=" << io::format_double(c.r) << " p=" << io::format_double(c.p_value) << " n=" << c.samples
         << " degenerate=0";
  } catch (const ValidationError&) {
    line << " r=0 p=1 n=" << gtds.size() << " degenerate=1";
  }
  return line.str() + "\n";
}

json checkpoint_json(const toy::Checkpoint& cp) {
  json layers = json::array();
  for (const auto& l : cp.layers) {
    layers.push_back({{"layer", l.layer},
                      {"mean_entropy", l.mean_entropy},
                      {"gtd", l.gtd},
                      {"indirect_entropy", l.indirect_entropy},
                      {"sparsity", l.sparsity}});
  }
  json heads = json::array();
  for (const auto& h : cp.heads) {
    heads.push_back({{"layer", h.layer},
                     {"head", h.head},
                     {"gtd", h.gtd},
                     {"indirect_entropy", h.indirect_entropy},
                     {"mean_entropy", h.mean_entropy},
                     {"sparsity", h.sparsity}});
  }
  return {{"step", cp.step},
          {"eval_loss", cp.eval_loss},
          {"layers", layers},
          {"heads", heads},
          {"final_layer_head_entropy", cp.final_layer_head_entropy}};
}

void write_weights(const fs::path& dir, const toy::ProjectionWeights& weights) {
  fs::create_directories(dir);
  for (const auto& [name, m] : weights.tensors()) {
    io::Tensor t;
    t.shape = {static_cast<std::uint32_t>(m->rows()), static_cast<std::uint32_t>(m->cols())};
    t.data.assign(m->data(), m->data() + m->size());
    io::write_tensor(dir / (name + ".saob"), t);
  }
}

std::string step_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d.csv", step);
  return buf;
}

// Runs one training configuration into `dir`, keeping the latest
// checkpoint's weights and diagnostics on disk as training proceeds.
toy::TrainLog train_into(const toy::ModelConfig& model, const toy::TrainConfig& train, const fs::path& dir) {
  fs::create_directories(dir / "diagnostics");
  std::vector<toy::Checkpoint> seen;
  auto on_checkpoint = [&](const toy::Checkpoint& cp, const toy::ProjectionWeights& w) {
    seen.push_back(cp);
    io::write_text_file(dir / "diagnostics" / step_name(cp.step),
                        io::diagnostics_csv(cp.heads, train.gtd, train.sparsity_epsilon));
    io::write_text_file(dir / "checkpoints.csv", checkpoints_csv(seen));
    write_weights(dir / "weights", w);
  };
  toy::TrainResult result = toy::train_toy(model, train, on_checkpoint);
  io::write_text_file(dir / "train_log.csv", train_log_csv(result.log));
  io::write_text_file(dir / "train_log.json", train_log_json(result.log));
  return std::move(result.log);
}

}  // namespace

std::string train_log_csv(const toy::TrainLog& log) {
  std::ostringstream out;
  out << "step,loss\n";
  for (const auto& s : log.steps) out << s.step << ',' << io::format_double(s.loss) << '\n';
  return out.str();
}

std::string checkpoints_csv(const std::vector<toy::Checkpoint>& checkpoints) {
  std::ostringstream out;
  out << "step,eval_loss,layer,mean_entropy,gtd,indirect_entropy,sparsity\n";
  for (const auto& cp : checkpoints) {
    for (const auto& l : cp.layers) {
      out << cp.step << ',' << io::format_double(cp.eval_loss) << ',' << l.layer << ','
          << io::format_double(l.mean_entropy) << ',' << io::format_double(l.gtd) << ','
          << io::format_double(l.indirect_entropy) << ',' << io::format_double(l.sparsity) << '\n';
    }
  }
  return out.str();
}

std::string train_log_json(const toy::TrainLog& log) {
  json steps = json::array();
  for (const auto& s : log.steps) steps.push_back({{"step", s.step}, {"loss", s.loss}});
  json cps = json::array();
  for (const auto& cp : log.checkpoints) cps.push_back(checkpoint_json(cp));
  return json{{"steps", steps}, {"checkpoints", cps}}.dump(1) + "\n";
}

OracleCheckResult oracle_discrepancy(std::size_t size, int trials, double lambda, FactorKind kind,
                                     bool masked, std::uint64_t seed) {
  const FactorSpec spec{kind, lambda};
  std::mt19937_64 gen(seed);
  OracleCheckResult result;
  for (int t = 0; t < trials; ++t) {
    const AttentionMatrix a = random_attention(size, masked, gen);
    const AttentionMatrix fast = refine(a, spec, masked).attention;
    const AttentionMatrix slow = oracle_refine(a, spec, true, masked);
    for (std::size_t e = 0; e < fast.data().size(); ++e) {
      const double x = fast.data()[e];
      const double y = slow.data()[e];
      if (x == y) continue;
      const double rel = std::abs(x - y) / std::max(std::abs(y), std::numeric_limits<double>::min());
      result.max_discrepancy = std::max(result.max_discrepancy, rel);
    }
    result.comparisons += fast.data().size();
  }
  return result;
}

int cmd_refine(const RefineOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const FactorSpec spec{parse_factor_kind(options.variant), options.lambda};
    spec.validate();
    const io::Tensor input = io::read_tensor(options.input);
    const AttentionStack stack = io::to_stack(input);
    std::vector<RefinementReport> reports;
    const AttentionStack refined = refine_stack(stack, spec, options.masked, &reports);

    io::TensorFormat format = io::TensorFormat::Binary;
    if (options.format == "json" || (options.format == "auto" && looks_like_json(options.input))) {
      format = io::TensorFormat::Json;
    } else if (options.format != "binary" && options.format != "auto") {
      throw ValidationError("unknown format '" + options.format + "'");
    }
    io::write_tensor(options.output, io::from_stack(refined, input.shape.size() == 2), format);

    double in_entropy = 0.0, out_entropy = 0.0, change = 0.0;
    for (const auto& r : reports) {
      in_entropy += r.input_entropy;
      out_entropy += r.output_entropy;
      change = std::max(change, r.max_change());
    }
    const auto n = static_cast<double>(reports.size());
    out << "variant=" << to_string(spec.kind) << " lambda=" << io::format_double(spec.lambda)
        << " masked=" << (options.masked ? 1 : 0) << " matrices=" << reports.size()
        << " input_entropy=" << io::format_double(in_entropy / n)
        << " output_entropy=" << io::format_double(out_entropy / n)
        << " max_change=" << io::format_double(change) << "\n";
    return kSuccess;
  });
}

int cmd_diagnose(const DiagnoseOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const GtdConfig config{options.beta, options.k};
    config.validate();
    if (options.format != "csv" && options.format != "json") {
      throw ValidationError("unknown format '" + options.format + "'");
    }
    const AttentionStack stack = load_stack(options.input, options.heads_per_layer, options.layout);
    const StackProfile profile = profile_stack(stack, config, options.epsilon);
    const std::string text = options.format == "csv"
                                 ? io::diagnostics_csv(profile.rows, config, options.epsilon)
                                 : io::diagnostics_json(profile.rows);
    emit(options.output, text, out);
    return kSuccess;
  });
}

int cmd_graph(const GraphOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const GtdConfig config{options.beta, options.k};
    config.validate();
    const AttentionStack stack = load_stack(options.input, options.heads_per_layer, std::nullopt);
    std::ostringstream text;
    text << "# tau=" << io::format_double(options.tau) << ",nodes=" << options.nodes << ",beta="
         << io::format_double(config.beta) << ",K=" << config.max_hop << "\n";
    text << "batch,layer,head,gtd,cc,bc,edges,degenerate\n";
    std::vector<double> gtds, ccs, bcs;
    for (std::size_t b = 0; b < stack.batch(); ++b) {
      for (std::size_t h = 0; h < stack.heads(); ++h) {
        const AttentionMatrix& a = stack.at(b, h);
        const TokenGraph g = project(a, options.tau, options.nodes);
        const double value = gtd(a, config);
        const double cc = clustering_coefficient(g);
        const double bc = betweenness_centrality(g);
        gtds.push_back(value);
        ccs.push_back(cc);
        bcs.push_back(bc);
        text << b << ',' << stack.slot(h).layer << ',' << stack.slot(h).head << ','
             << io::format_double(value) << ',' << io::format_double(cc) << ',' << io::format_double(bc)
             << ',' << g.edge_count() << ',' << (g.degenerate() ? 1 : 0) << '\n';
      }
    }
    text << correlation_line("cc", gtds, ccs) << correlation_line("bc", gtds, bcs);
    emit(options.output, text.str(), out);
    return kSuccess;
  });
}

TrainSetup parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  TrainSetup setup;
  try {
    const json model = j.value("model", json::object());
    auto& m = setup.model;
    m.layers = model.value("layers", m.layers);
    m.heads = model.value("heads", m.heads);
    m.hidden = model.value("hidden", m.hidden);
    m.ffn = model.value("ffn", m.ffn);
    m.vocab = model.value("vocab", m.vocab);
    m.max_len = model.value("max_len", m.max_len);
    m.causal = model.value("causal", m.causal);
    m.seed = model.value("seed", m.seed);
    m.stop_message_gradient = model.value("stop_message_gradient", m.stop_message_gradient);

    const json train = j.value("train", json::object());
    auto& t = setup.train;
    t.task = toy::parse_task(train.value("task", std::string(toy::to_string(t.task))));
    t.steps = train.value("steps", t.steps);
    t.batch_size = train.value("batch_size", t.batch_size);
    t.sequence_length = train.value("sequence_length", t.sequence_length);
    t.learning_rate = train.value("learning_rate", t.learning_rate);
    t.warmup_fraction = train.value("warmup_fraction", t.warmup_fraction);
    t.grad_clip = train.value("grad_clip", t.grad_clip);
    t.checkpoint_every = train.value("checkpoint_every", t.checkpoint_every);
    t.eval_batch = train.value("eval_batch", t.eval_batch);
    t.gtd.beta = train.value("beta", t.gtd.beta);
    t.gtd.max_hop = train.value("k", t.gtd.max_hop);
    t.sparsity_epsilon = train.value("sparsity_epsilon", t.sparsity_epsilon);

    if (model.contains("refinement") && !model["refinement"].is_null()) {
      const json& r = model["refinement"];
      FactorSpec spec{parse_factor_kind(r.value("variant", std::string("high"))), 0.0};
      const json lambda = r.value("lambda", json("auto"));
      if (lambda.is_string() && lambda.get<std::string>() == "auto") {
        spec.lambda = lambda_for_scale(static_cast<std::int64_t>(
            toy::ProjectionWeights::zeros(m).parameter_count()));
      } else {
        spec.lambda = lambda.get<double>();
      }
      m.refinement = spec;
    }
    setup.compare_with_baseline = j.value("compare_with_baseline", false);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  setup.model.validate();
  setup.train.validate(setup.model);
  return setup;
}

int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const TrainSetup setup = parse_train_config(io::read_text_file(options.config));
    fs::create_directories(options.out_dir);
    const toy::TrainLog log = train_into(setup.model, setup.train, options.out_dir);
    out << "steps=" << log.steps.size() << " checkpoints=" << log.checkpoints.size();
    if (!log.steps.empty()) out << " final_loss=" << io::format_double(log.steps.back().loss);
    out << "\n";

    if (setup.compare_with_baseline && setup.model.refinement) {
      toy::ModelConfig baseline = setup.model;
      baseline.refinement.reset();
      const toy::TrainLog base_log = train_into(baseline, setup.train, options.out_dir / "baseline");
      const auto& refined_heads = log.checkpoints.back().final_layer_head_entropy;
      const auto& base_heads = base_log.checkpoints.back().final_layer_head_entropy;
      std::ostringstream csv;
      csv << "head,baseline,refined,delta\n";
      for (std::size_t h = 0; h < refined_heads.size(); ++h) {
        csv << h << ',' << io::format_double(base_heads[h]) << ',' << io::format_double(refined_heads[h])
            << ',' << io::format_double(refined_heads[h] - base_heads[h]) << '\n';
      }
      const double b = base_log.checkpoints.back().final_layer_entropy();
      const double r = log.checkpoints.back().final_layer_entropy();
      csv << "mean," << io::format_double(b) << ',' << io::format_double(r) << ','
          << io::format_double(r - b) << '\n';
      io::write_text_file(options.out_dir / "comparison.csv", csv.str());
      out << "baseline_final_layer_entropy=" << io::format_double(b)
          << " refined_final_layer_entropy=" << io::format_double(r) << "\n";
    }
    return kSuccess;
  });
}

int cmd_oracle_check(const OracleCheckOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (options.size == 0 || options.size > kOracleMaxSize) {
      throw ValidationError("oracle-check: l must lie in [1, " + std::to_string(kOracleMaxSize) + "]");
    }
    if (options.trials < 1) throw ValidationError("oracle-check: trials must be positive");
    double worst = 0.0;
    for (const double lambda : options.lambdas) {
      FactorSpec{FactorKind::High, lambda}.validate();
      for (const FactorKind kind : {FactorKind::High, FactorKind::Low}) {
        for (const bool masked : {false, true}) {
          const auto r = oracle_discrepancy(options.size, options.trials, lambda, kind, masked, options.seed);
          out << "l=" << options.size << " lambda=" << io::format_double(lambda) << " variant=" << to_string(kind)
              << (masked ? " masked" : "") << " trials=" << options.trials
              << " max_rel=" << io::format_double(r.max_discrepancy) << "\n";
          worst = std::max(worst, r.max_discrepancy);
        }
      }
    }
    const bool pass = worst < options.tolerance;
    out << "max relative discrepancy: " << io::format_double(worst) << (pass ? " PASS" : " FAIL") << "\n";
    return pass ? kSuccess : kValidationFailure;
  });
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention refinement and localization diagnostics"};
  app.require_subcommand(1);

  RefineOptions refine_opts;
  auto* refine_cmd = app.add_subcommand("refine", "Refine attention tensors by one-step belief propagation");
  refine_cmd->add_option("input", refine_opts.input, "Input tensor (L x L or B x H x L x L)")->required();
  refine_cmd->add_option("output", refine_opts.output, "Output tensor path")->required();
  refine_cmd->add_option("--variant", refine_opts.variant, "high | low | elemmul")->capture_default_str();
  refine_cmd->add_option("--lambda", refine_opts.lambda, "Repulsion strength")->capture_default_str();
  refine_cmd->add_flag("--masked", refine_opts.masked, "Causal (decoder) refinement");
  refine_cmd->add_option("--format", refine_opts.format, "auto | binary | json")->capture_default_str();

  DiagnoseOptions diag_opts;
  std::string diag_output;
  std::string diag_layout;
  auto* diag_cmd = app.add_subcommand("diagnose", "GTD, indirect entropy, entropy and sparsity per head");
  diag_cmd->add_option("input", diag_opts.input, "Input tensor")->required();
  diag_cmd->add_option("--beta", diag_opts.beta, "Path discount")->capture_default_str();
  diag_cmd->add_option("-k,--k", diag_opts.k, "Longest path length")->capture_default_str();
  diag_cmd->add_option("--epsilon", diag_opts.epsilon, "Sparsity threshold")->capture_default_str();
  diag_cmd->add_option("--format", diag_opts.format, "csv | json")->capture_default_str();
  diag_cmd->add_option("-o,--output", diag_output, "Output file (default stdout)");
  diag_cmd->add_option("--heads-per-layer", diag_opts.heads_per_layer, "Split the head axis into layers");
  diag_cmd->add_option("--layout", diag_layout, "JSON [[layer, head], ...] sidecar");

  GraphOptions graph_opts;
  std::string graph_output;
  auto* graph_cmd = app.add_subcommand("graph", "Token-graph clustering/betweenness vs GTD");
  graph_cmd->add_option("input", graph_opts.input, "Input tensor")->required();
  graph_cmd->add_option("--tau", graph_opts.tau, "Edge threshold")->capture_default_str();
  graph_cmd->add_option("--nodes", graph_opts.nodes, "Subgraph size")->capture_default_str();
  graph_cmd->add_option("--beta", graph_opts.beta, "Path discount")->capture_default_str();
  graph_cmd->add_option("-k,--k", graph_opts.k, "Longest path length")->capture_default_str();
  graph_cmd->add_option("--heads-per-layer", graph_opts.heads_per_layer, "Split the head axis into layers");
  graph_cmd->add_option("-o,--output", graph_output, "Output file (default stdout)");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train the toy transformer");
  train_cmd->add_option("config", train_opts.config, "JSON config")->required();
  train_cmd->add_option("out_dir", train_opts.out_dir, "Output directory")->required();

  OracleCheckOptions oracle_opts;
  auto* oracle_cmd = app.add_subcommand("oracle-check", "Compare vectorized refinement with the scalar oracle");
  oracle_cmd->add_option("-l,--l", oracle_opts.size, "Matrix size")->capture_default_str();
  oracle_cmd->add_option("--trials", oracle_opts.trials, "Random matrices per setting")->capture_default_str();
  oracle_cmd->add_option("--lambda", oracle_opts.lambdas, "Repulsion strengths")->delimiter(',');
  oracle_cmd->add_option("--seed", oracle_opts.seed, "RNG seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kValidationFailure;
  }

  if (*refine_cmd) return cmd_refine(refine_opts, out, err);
  if (*diag_cmd) {
    if (!diag_output.empty()) diag_opts.output = diag_output;
    if (!diag_layout.empty()) diag_opts.layout = diag_layout;
    return cmd_diagnose(diag_opts, out, err);
  }
  if (*graph_cmd) {
    if (!graph_output.empty()) graph_opts.output = graph_output;
    return cmd_graph(graph_opts, out, err);
  }
  if (*train_cmd) return cmd_train(train_opts, out, err);
  if (*oracle_cmd) return cmd_oracle_check(oracle_opts, out, err);
  return kValidationFailure;
}

}  // namespace saobp::cli
