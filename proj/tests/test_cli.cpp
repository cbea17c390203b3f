// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "saobp/cli.hpp"
#include "saobp/graph.hpp"
#include "saobp/io.hpp"
#include "test_support.hpp"

using namespace saobp;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = SAOBP_FIXTURE_DIR;

fs::path scratch_dir(const char* name) {
  auto dir = fs::temp_directory_path() / "saobp_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Invocation {
  int status;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "saobp");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int status = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {status, out.str(), err.str()};
}

/// Runs the installed executable and returns its exit code.
int run_binary(const std::string& args) {
  const std::string command = std::string(SAOBP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int raw = std::system(command.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

io::Tensor stack_tensor(std::size_t batch, std::size_t heads, std::size_t n, std::mt19937_64& gen) {
  io::Tensor t;
  t.shape = {static_cast<std::uint32_t>(batch), static_cast<std::uint32_t>(heads), static_cast<std::uint32_t>(n),
             static_cast<std::uint32_t>(n)};
  for (std::size_t m = 0; m < batch * heads; ++m) {
    const auto a = testing::random_attention(n, gen, false, 1.0 + static_cast<double>(m));
    t.data.insert(t.data.end(), a.data().begin(), a.data().end());
  }
  return t;
}

}  // namespace

TEST_CASE("refine: fixture file reproduces the frozen 2x2 result") {
  const auto dir = scratch_dir("refine_fixture");
  const auto r = invoke({"refine", (kFixtures / "attention_2x2.json").string(), (dir / "out.json").string(),
                         "--variant", "high", "--lambda", "0.2"});
  REQUIRE(r.status == 0);
  CHECK(r.out.find("variant=high") != std::string::npos);
  const auto got = io::read_tensor(dir / "out.json");
  const auto want = io::read_tensor(kFixtures / "refined_2x2_high_0.2.json");
  CHECK(got.shape == want.shape);
  CHECK(testing::max_abs_diff(got.data, want.data) < 1e-13);
}

TEST_CASE("refine: lambda 0 returns the input; elemmul keeps uniform") {
  const auto dir = scratch_dir("refine_identity");
  std::mt19937_64 gen(12);
  const auto input = stack_tensor(2, 3, 7, gen);
  io::write_tensor(dir / "in.saob", input);
  for (const char* variant : {"high", "low"}) {
    REQUIRE(invoke({"refine", (dir / "in.saob").string(), (dir / "out.saob").string(), "--variant", variant,
                    "--lambda", "0"})
                .status == 0);
    const auto out = io::read_tensor(dir / "out.saob");
    CHECK(out.shape == input.shape);
    // Only the final renormalization by sum_k A_jk (= 1 up to rounding) can move a bit.
    CHECK(testing::max_abs_diff(out.data, input.data) < 1e-15);
  }
  io::write_tensor(dir / "u.json", io::from_matrix(AttentionMatrix::uniform(5)), io::TensorFormat::Json);
  REQUIRE(invoke({"refine", (dir / "u.json").string(), (dir / "u_out.json").string(), "--variant", "elemmul"})
              .status == 0);
  const auto u = io::read_tensor(dir / "u_out.json");
  CHECK(u.shape == std::vector<std::uint32_t>{5, 5});
  for (double v : u.data) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("refine: masked and format options") {
  const auto dir = scratch_dir("refine_masked");
  std::mt19937_64 gen(13);
  io::write_tensor(dir / "c.saob", io::from_matrix(testing::random_attention(6, gen, true)));
  REQUIRE(invoke({"refine", (dir / "c.saob").string(), (dir / "c_out.json").string(), "--masked", "--format",
                  "json"})
              .status == 0);
  const auto s = io::to_stack(io::read_tensor(dir / "c_out.json"));
  CHECK(s.at(0, 0).is_lower_triangular());
  // Dense input cannot take the masked path.
  io::write_tensor(dir / "d.saob", io::from_matrix(AttentionMatrix::uniform(4)));
  CHECK(invoke({"refine", (dir / "d.saob").string(), (dir / "x.saob").string(), "--masked"}).status == 1);
  CHECK(invoke({"refine", (dir / "d.saob").string(), (dir / "x.saob").string(), "--variant", "bogus"}).status == 1);
  CHECK(invoke({"refine", (dir / "d.saob").string(), (dir / "x.saob").string(), "--lambda", "-1"}).status == 1);
  CHECK_FALSE(fs::exists(dir / "x.saob"));
}

TEST_CASE("diagnose: identity input, defaults comment, CSV/JSON agree") {
  const auto dir = scratch_dir("diagnose");
  io::write_tensor(dir / "id.saob", io::from_matrix(AttentionMatrix::identity(6)));
  const auto r = invoke({"diagnose", (dir / "id.saob").string()});
  REQUIRE(r.status == 0);
  CHECK(r.out.rfind("# beta=0.9,K=4,epsilon=0.001\n", 0) == 0);
  const auto csv = io::parse_csv(r.out);
  REQUIRE(csv.rows.size() == 1);
  CHECK(std::abs(std::stod(csv.rows[0][csv.column("gtd")]) - 0.8560886240791651) < 1e-12);
  CHECK(std::stod(csv.rows[0][csv.column("mean_entropy")]) == 0.0);
  CHECK(csv.rows[0][csv.column("gtd_health")] == "high");

  std::mt19937_64 gen(14);
  io::write_tensor(dir / "s.saob", stack_tensor(2, 4, 8, gen));
  REQUIRE(invoke({"diagnose", (dir / "s.saob").string(), "--heads-per-layer", "2", "-o", (dir / "d.csv").string()})
              .status == 0);
  REQUIRE(invoke({"diagnose", (dir / "s.saob").string(), "--heads-per-layer", "2", "--format", "json", "-o",
                  (dir / "d.json").string()})
              .status == 0);
  const auto c = io::parse_csv(io::read_text_file(dir / "d.csv"));
  const auto j = nlohmann::json::parse(io::read_text_file(dir / "d.json"));
  REQUIRE(c.rows.size() == 4);
  REQUIRE(j.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::stoul(c.rows[i][c.column("layer")]) == i / 2);
    for (const char* key : {"gtd", "indirect_entropy", "mean_entropy", "sparsity"})
      CHECK(std::stod(c.rows[i][c.column(key)]) == j[i][key].get<double>());
  }

  io::write_text_file(dir / "layout.json", "[[1, 0], [1, 1], [0, 0], [0, 1]]");
  const auto laid = invoke({"diagnose", (dir / "s.saob").string(), "--layout", (dir / "layout.json").string()});
  REQUIRE(laid.status == 0);
  const auto l = io::parse_csv(laid.out);
  // Rows come out layer-major: the third and fourth heads of the tensor first.
  CHECK(l.rows[0][l.column("gtd")] == c.rows[2][c.column("gtd")]);
  io::write_text_file(dir / "bad_layout.json", "[[0, 0]]");
  CHECK(invoke({"diagnose", (dir / "s.saob").string(), "--layout", (dir / "bad_layout.json").string()}).status == 1);
  CHECK(invoke({"diagnose", (dir / "s.saob").string(), "--beta", "1.5"}).status == 1);
}

TEST_CASE("graph: uniform, identity and the reported correlation") {
  const auto dir = scratch_dir("graph");
  io::write_tensor(dir / "u.saob", io::from_matrix(AttentionMatrix::uniform(6)));
  auto r = invoke({"graph", (dir / "u.saob").string()});
  REQUIRE(r.status == 0);
  auto csv = io::parse_csv(r.out);
  CHECK(csv.rows[0][csv.column("cc")] == "1");
  CHECK(csv.rows[0][csv.column("bc")] == "0");
  CHECK(csv.rows[0][csv.column("edges")] == "15");
  CHECK(csv.rows[0][csv.column("degenerate")] == "1");

  io::write_tensor(dir / "i.saob", io::from_matrix(AttentionMatrix::identity(6)));
  r = invoke({"graph", (dir / "i.saob").string()});
  REQUIRE(r.status == 0);
  csv = io::parse_csv(r.out);
  CHECK(csv.rows[0][csv.column("edges")] == "0");
  // A single head has nothing to correlate; the line is still emitted, flagged.
  CHECK(r.out.find("# pearson metric=cc r=0 p=1 n=1 degenerate=1") != std::string::npos);

  std::mt19937_64 gen(15);
  io::Tensor sparse;
  sparse.shape = {1, 12, 10, 10};
  for (int m = 0; m < 12; ++m) {
    const auto a = testing::random_sparse_attention(10, gen, 0.4 + 0.04 * m);
    sparse.data.insert(sparse.data.end(), a.data().begin(), a.data().end());
  }
  io::write_tensor(dir / "s.saob", sparse);
  r = invoke({"graph", (dir / "s.saob").string(), "--tau", "0.05"});
  REQUIRE(r.status == 0);
  csv = io::parse_csv(r.out);
  REQUIRE(csv.rows.size() == 12);
  std::vector<double> gtd, cc;
  for (const auto& row : csv.rows) {
    gtd.push_back(std::stod(row[csv.column("gtd")]));
    cc.push_back(std::stod(row[csv.column("cc")]));
  }
  const auto expect = pearson(gtd, cc);
  const auto at = r.out.find("# pearson metric=cc r=");
  REQUIRE(at != std::string::npos);
  const double reported = std::stod(r.out.substr(at + std::string("# pearson metric=cc r=").size()));
  CHECK(std::abs(reported - expect.r) < 1e-12);
  CHECK(r.out.find("# tau=0.05") != std::string::npos);
  CHECK(invoke({"graph", (dir / "s.saob").string(), "--tau", "0"}).status == 1);
}

TEST_CASE("oracle-check") {
  auto r = invoke({"oracle-check", "-l", "8", "--trials", "20", "--lambda", "0.05,0.2,1.0"});
  CHECK(r.status == 0);
  CHECK(r.out.find("PASS") != std::string::npos);
  r = invoke({"oracle-check", "-l", "64", "--trials", "2", "--lambda", "1.0"});
  CHECK(r.status == 0);
  CHECK(invoke({"oracle-check", "-l", "65"}).status == 1);
  CHECK(invoke({"oracle-check", "--trials", "0"}).status == 1);
}

TEST_CASE("train: outputs, determinism and baseline pairing") {
  const auto a = scratch_dir("train_a");
  const auto b = scratch_dir("train_b");
  const auto config = (kFixtures / "train_tiny.json").string();
  REQUIRE(invoke({"train", config, a.string()}).status == 0);
  REQUIRE(invoke({"train", config, b.string()}).status == 0);
  for (const char* file : {"train_log.csv", "train_log.json", "checkpoints.csv"}) {
    REQUIRE(fs::exists(a / file));
    CHECK(io::read_text_file(a / file) == io::read_text_file(b / file));
  }
  for (const char* step : {"step_000000.csv", "step_000005.csv", "step_000010.csv", "step_000012.csv"})
    CHECK(fs::exists(a / "diagnostics" / step));
  const auto embed = io::read_tensor(a / "weights" / "token_embedding.saob");
  CHECK(embed.shape == std::vector<std::uint32_t>{12, 16});
  CHECK(io::parse_csv(io::read_text_file(a / "train_log.csv")).rows.size() == 12);

  auto j = nlohmann::json::parse(io::read_text_file(kFixtures / "train_tiny.json"));
  j["compare_with_baseline"] = true;
  j["model"]["refinement"]["lambda"] = "auto";
  io::write_text_file(a / "paired.json", j.dump());
  const auto c = scratch_dir("train_paired");
  const auto r = invoke({"train", (a / "paired.json").string(), c.string()});
  REQUIRE(r.status == 0);
  CHECK(fs::exists(c / "baseline" / "train_log.csv"));
  const auto cmp = io::parse_csv(io::read_text_file(c / "comparison.csv"));
  CHECK(cmp.header == std::vector<std::string>{"head", "baseline", "refined", "delta"});
  REQUIRE(cmp.rows.size() == 3);  // two final-layer heads and the mean
  CHECK(cmp.rows.back()[0] == "mean");

  io::write_text_file(a / "bad.json", R"({"model": {"causal": true, "refinement": {"variant": "elemmul"}}})");
  CHECK(invoke({"train", (a / "bad.json").string(), c.string()}).status == 1);
  io::write_text_file(a / "bad2.json", "{ not json");
  CHECK(invoke({"train", (a / "bad2.json").string(), c.string()}).status == 1);
  io::write_text_file(a / "boom.json",
                      R"({"model": {"hidden": 16, "ffn": 16, "max_len": 8},
                          "train": {"steps": 20, "sequence_length": 8, "learning_rate": 1e300, "warmup_fraction": 0}})");
  CHECK(invoke({"train", (a / "boom.json").string(), c.string()}).status == 2);
}

TEST_CASE("executable exit codes") {
  const auto dir = scratch_dir("binary");
  CHECK(run_binary("--help") == 0);
  CHECK(run_binary("") == 1);
  CHECK(run_binary("refine") == 1);
  CHECK(run_binary("diagnose " + (dir / "missing.saob").string()) == 1);
  io::write_text_file(dir / "nan.json", R"({"shape": [2, 2], "data": [1, 0, 0.5, 2]})");
  CHECK(run_binary("diagnose " + (dir / "nan.json").string()) == 1);
  CHECK(run_binary("diagnose " + (kFixtures / "attention_2x2.json").string()) == 0);
}
