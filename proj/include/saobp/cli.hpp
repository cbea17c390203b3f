// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `saobp` executable. Each command
// returns a process exit status: 0 on success, 1 on invalid input, 2 on
// internal failure.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "saobp/toymodel.hpp"

namespace saobp::cli {

enum ExitStatus : int { kSuccess = 0, kValidationFailure = 1, kInternalError = 2 };

struct RefineOptions {
  std::filesystem::path input;
  std::filesystem::path output;
  std::string variant = "high";
  double lambda = 0.2;
  bool masked = false;
  /// "auto" keeps the input's encoding, otherwise "binary" or "json".
  std::string format = "auto";
};

struct DiagnoseOptions {
  std::filesystem::path input;
  double beta = 0.9;
  int k = 4;
  double epsilon = 1e-3;
  std::string format = "csv";
  std::optional<std::filesystem::path> output;
  std::size_t heads_per_layer = 0;
  /// JSON array of [layer, head] pairs, one per head of the tensor.
  std::optional<std::filesystem::path> layout;
};

struct GraphOptions {
  std::filesystem::path input;
  double tau = 1e-4;
  std::size_t nodes = 40;
  double beta = 0.9;
  int k = 4;
  std::optional<std::filesystem::path> output;
  std::size_t heads_per_layer = 0;
};

struct TrainOptions {
  std::filesystem::path config;
  std::filesystem::path out_dir;
};

struct OracleCheckOptions {
  std::size_t size = 8;
  int trials = 100;
  std::vector<double> lambdas{0.2};
  std::uint64_t seed = 1;
  double tolerance = 1e-10;
};

int cmd_refine(const RefineOptions& options, std::ostream& out, std::ostream& err);
int cmd_diagnose(const DiagnoseOptions& options, std::ostream& out, std::ostream& err);
int cmd_graph(const GraphOptions& options, std::ostream& out, std::ostream& err);
int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err);
int cmd_oracle_check(const OracleCheckOptions& options, std::ostream& out, std::ostream& err);

/// Largest relative discrepancy between refine() and oracle_refine() over
/// random inputs; used by oracle-check.
struct OracleCheckResult {
  double max_discrepancy = 0.0;
  std::size_t comparisons = 0;
};
OracleCheckResult oracle_discrepancy(std::size_t size, int trials, double lambda, FactorKind kind,
                                     bool masked, std::uint64_t seed);

/// Parsed form of the JSON training config accepted by `saobp train`.
struct TrainSetup {
  toy::ModelConfig model;
  toy::TrainConfig train;
  bool compare_with_baseline = false;
};
TrainSetup parse_train_config(const std::string& json_text);

/// TrainLog serializations written by `saobp train`.
std::string train_log_csv(const toy::TrainLog& log);
std::string checkpoints_csv(const std::vector<toy::Checkpoint>& checkpoints);
std::string train_log_json(const toy::TrainLog& log);

/// Full command-line entry point.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace saobp::cli
