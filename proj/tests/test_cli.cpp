#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tvcl/experiment.hpp"
#include "tvcl/task_vector.hpp"

using namespace tvcl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tvcl_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) out.push_back(line);
  return out;
}

struct Outcome {
  int code = -1;
  std::string output;
};

// Runs the CLI with `args`, capturing stdout and stderr together.
Outcome cli(const std::string& args, const fs::path& dir) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(TVCL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(log)};
}

// Small and fast: smoke suite, a briefly pretrained backbone, two epochs.
json small_config(const fs::path& out) {
  return {
      {"backbone", {{"pretrain", {{"steps", 20}}}}},
      {"train", {{"epochs", 2}}},
      {"suite", {{"profile", "smoke"}}},
      {"run", {{"method", "ours_adapter"}, {"seeds", {0}}, {"output_dir", out.string()}}},
  };
}

fs::path write_config(const fs::path& dir, const json& config) {
  const fs::path p = dir / "config.json";
  write_file(p, config.dump(2));
  return p;
}

// Writes the config and pretrains its backbone into the config's output dir.
fs::path prepared(const fs::path& dir, const json& config) {
  const auto path = write_config(dir, config);
  const auto r = cli("pretrain --config " + path.string(), dir);
  EXPECT_EQ(r.code, 0) << r.output;
  return path;
}

json without_wall_time(json j) {
  j.erase("wall_time_seconds");
  return j;
}

}  // namespace

TEST(CliPretrain, WritesIdenticalBytesOnRepeat) {
  const auto dir = scratch("pretrain");
  const auto config = write_config(dir, small_config(dir / "out"));
  ASSERT_EQ(cli("pretrain --config " + config.string(), dir).code, 0);
  const auto first = read_file(dir / "out" / "backbone.tvec");
  EXPECT_FALSE(first.empty());
  EXPECT_TRUE(fs::exists(dir / "out" / "pretrain_config.json"));
  ASSERT_EQ(cli("pretrain --config " + config.string(), dir).code, 0);
  EXPECT_EQ(read_file(dir / "out" / "backbone.tvec"), first);
  const auto resolved = json::parse(read_file(dir / "out" / "pretrain_config.json"));
  EXPECT_EQ(resolved.at("train").at("learning_rate"), 1e-3);
  EXPECT_EQ(resolved.at("merge").at("lambda"), 0.25);
}

TEST(CliPretrain, OutFlagOverridesOutputDir) {
  const auto dir = scratch("override");
  const auto config = write_config(dir, small_config(dir / "ignored"));
  ASSERT_EQ(cli("pretrain --config " + config.string() + " --out " + (dir / "elsewhere").string(), dir).code, 0);
  EXPECT_TRUE(fs::exists(dir / "elsewhere" / "backbone.tvec"));
  EXPECT_FALSE(fs::exists(dir / "ignored"));
}

TEST(CliConfig, UnknownKeyExitsTwoNamingTheKey) {
  const auto dir = scratch("unknown_key");
  auto config = small_config(dir / "out");
  config["train"]["learning_rte"] = 0.01;
  const auto r = cli("pretrain --config " + write_config(dir, config).string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("train.learning_rte"), std::string::npos) << r.output;
}

TEST(CliConfig, BadArgumentsExitTwo) {
  const auto dir = scratch("bad_args");
  const auto config = write_config(dir, small_config(dir / "out"));
  EXPECT_EQ(cli("run", dir).code, 2);
  EXPECT_EQ(cli("frobnicate --config " + config.string(), dir).code, 2);
  EXPECT_EQ(cli("sweep --config " + config.string() + " --dimension lambda --values 0.1,x", dir).code, 2);
  EXPECT_EQ(cli("sweep --config " + config.string() + " --dimension depth --values 1", dir).code, 2);
  EXPECT_EQ(cli("run --config " + (dir / "absent.json").string(), dir).code, 2);
  write_file(dir / "broken.json", "{ not json");
  EXPECT_EQ(cli("run --config " + (dir / "broken.json").string(), dir).code, 2);
}

TEST(CliRun, MissingBackboneExitsFour) {
  const auto dir = scratch("missing");
  const auto config = write_config(dir, small_config(dir / "out"));
  const auto r = cli("run --config " + config.string(), dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.output.find("backbone"), std::string::npos);
}

TEST(CliRun, UnreadableBackboneExitsFour) {
  const auto dir = scratch("corrupt");
  const auto config = write_config(dir, small_config(dir / "out"));
  fs::create_directories(dir / "out");
  write_file(dir / "out" / "backbone.tvec", "not a container");
  EXPECT_EQ(cli("run --config " + config.string(), dir).code, 4);
}

TEST(CliRun, ThreeOrdersGiveThreeReportsAndStableBytes) {
  const auto dir = scratch("run");
  const auto config = prepared(dir, small_config(dir / "out"));
  const auto r = cli("run --config " + config.string(), dir);
  ASSERT_EQ(r.code, 0) << r.output;

  std::vector<fs::path> reports;
  for (const auto& e : fs::directory_iterator(dir / "out" / "runs")) reports.push_back(e.path());
  std::sort(reports.begin(), reports.end());
  ASSERT_EQ(reports.size(), 3u);
  const auto csv = read_file(dir / "out" / "results.csv");
  const auto rows = lines_of(csv);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "method,order,seed,init_strategy,lambda,t1,t2,t3,t4,t5,average");
  EXPECT_EQ(rows[1].rfind("ours_adapter,1-2-3-4-5,0,pre,0.25,", 0), 0u) << rows[1];
  EXPECT_EQ(rows[2].rfind("ours_adapter,5-4-3-2-1,0,pre,0.25,", 0), 0u) << rows[2];
  EXPECT_EQ(rows[3].rfind("ours_adapter,3-5-1-4-2,0,pre,0.25,", 0), 0u) << rows[3];
  std::vector<json> first;
  for (const auto& p : reports) {
    const auto j = json::parse(read_file(p));
    const auto report = run_report_from_json(j);
    EXPECT_EQ(report.per_task_accuracy.size(), 5u);
    first.push_back(without_wall_time(j));
  }
  EXPECT_TRUE(fs::exists(dir / "out" / "resolved_config.json"));
  EXPECT_EQ(std::distance(fs::directory_iterator(dir / "out" / "taskvectors"), fs::directory_iterator{}), 3);

  ASSERT_EQ(cli("run --config " + config.string(), dir).code, 0);
  EXPECT_EQ(read_file(dir / "out" / "results.csv"), csv);
  ASSERT_EQ(cli("run --config " + config.string() + " --jobs 2", dir).code, 0);
  EXPECT_EQ(read_file(dir / "out" / "results.csv"), csv);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    EXPECT_EQ(without_wall_time(json::parse(read_file(reports[i]))), first[i]) << reports[i];
  }
}

TEST(CliRun, MtlIgnoresOrders) {
  const auto dir = scratch("mtl");
  auto config = small_config(dir / "out");
  config["run"]["method"] = "mtl";
  const auto path = prepared(dir, config);
  ASSERT_EQ(cli("run --config " + path.string(), dir).code, 0);
  ASSERT_EQ(std::distance(fs::directory_iterator(dir / "out" / "runs"), fs::directory_iterator{}), 1);
  const auto j = json::parse(read_file(fs::directory_iterator(dir / "out" / "runs")->path()));
  EXPECT_TRUE(j.at("order").is_null());
  EXPECT_EQ(lines_of(read_file(dir / "out" / "results.csv")).size(), 2u);
}

TEST(CliRun, DivergenceExitsFiveWithRunId) {
  const auto dir = scratch("diverge");
  auto config = small_config(dir / "out");
  config["run"]["orders"] = {{2, 1, 3, 4, 5}};
  const auto path = prepared(dir, config);
  config["train"]["learning_rate"] = 1e38;
  write_config(dir, config);
  const auto r = cli("run --config " + path.string(), dir);
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.output.find("ours_adapter_pre_o2-1-3-4-5_s0"), std::string::npos) << r.output;
}

TEST(CliSweep, SingleLambdaMatchesRunAverage) {
  const auto dir = scratch("sweep_single");
  const auto path = prepared(dir, small_config(dir / "out"));
  ASSERT_EQ(cli("run --config " + path.string(), dir).code, 0);
  std::vector<double> averages;
  for (const auto& e : fs::directory_iterator(dir / "out" / "runs")) {
    averages.push_back(json::parse(read_file(e.path())).at("average_accuracy").get<double>());
  }
  const auto r = cli("sweep --config " + path.string() + " --dimension lambda --values 0.25", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines_of(read_file(dir / "out" / "sweep_lambda.csv"));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "lambda,average_accuracy");
  EXPECT_EQ(rows[1], "0.25," + format_one_decimal(100.0 * aggregate_average(averages)));
}

TEST(CliSweep, LambdaArgmaxMatchesLambdaSweep) {
  const auto dir = scratch("sweep_lambda");
  auto j = small_config(dir / "out");
  j["run"]["orders"] = {{3, 5, 1, 4, 2}};
  const auto path = prepared(dir, j);
  const std::vector<double> grid{0.1, 0.25, 0.5, 0.75, 1.0};
  const auto r = cli("sweep --config " + path.string() + " --dimension lambda --values 0.1,0.25,0.5,0.75,1", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(lines_of(read_file(dir / "out" / "sweep_lambda.csv")).size(), 6u);

  const auto config = load_experiment_config(path);
  const auto rows = cmd_sweep(config, SweepDimension::lambda, grid, dir / "lib", 1);
  ASSERT_EQ(rows.size(), grid.size());
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].average_accuracy > rows[best].average_accuracy) best = i;
  }

  // Independent path: train the run, then let lambda_sweep score the grid
  // on the same test splits the sweep table reports.
  const auto backbone = load_backbone(config);
  const auto suite = generate_suite(config.suite.master_seed, config.suite.profile);
  auto spec = plan_runs(config).front();
  spec.merge.sweep = false;
  const auto result = execute_run(config, suite, backbone, spec);
  auto sorted = result.task_vectors;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.source_task < b.source_task; });
  std::vector<TaskDataset> test_sets;
  for (const auto& t : suite.tasks) test_sets.push_back(t.test);
  const auto sweep = lambda_sweep(sorted, result.modules.front(), backbone, test_sets, grid);
  EXPECT_EQ(sweep.best_lambda, rows[best].value);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(sweep.table[i].second, rows[i].average_accuracy, 1e-12);
}

TEST(CliSweep, RankSweepKeepsInputOrder) {
  const auto dir = scratch("sweep_rank");
  auto config = small_config(dir / "out");
  config["backbone"]["d_model"] = 64;
  config["backbone"]["d_ff"] = 64;
  config["run"]["method"] = "ours_lora";
  config["run"]["orders"] = {{1, 2, 3, 4, 5}};
  config["train"]["epochs"] = 1;
  const auto path = prepared(dir, config);
  const auto r = cli("sweep --config " + path.string() + " --dimension lora_rank --values 16,1,64,4", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines_of(read_file(dir / "out" / "sweep_lora_rank.csv"));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[1].rfind("16,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("1,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("64,", 0), 0u);
  EXPECT_EQ(rows[4].rfind("4,", 0), 0u);
  EXPECT_EQ(cli("sweep --config " + path.string() + " --dimension adapter_bottleneck --values 8", dir).code, 2);
  EXPECT_EQ(cli("sweep --config " + path.string() + " --dimension lora_rank --values 2.5", dir).code, 2);
}

TEST(CliAblate, ThreeRowsInFixedOrder) {
  const auto dir = scratch("ablate");
  auto config = small_config(dir / "out");
  config["run"]["orders"] = {{1, 2, 3, 4, 5}};
  const auto path = prepared(dir, config);
  const auto r = cli("ablate-init --config " + path.string() + " --jobs 2", dir);
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines_of(read_file(dir / "out" / "ablate_init.csv"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "init_strategy,average_accuracy");
  EXPECT_EQ(rows[1].rfind("noinit,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("pre,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("mean,", 0), 0u);
  EXPECT_NE(r.output.find("ordering pre >= mean >= noinit"), std::string::npos);
}

namespace {

class ScratchCleanup : public ::testing::Environment {
 public:
  void TearDown() override { fs::remove_all(fs::temp_directory_path() / ("tvcl_cli_" + std::to_string(::getpid()))); }
};

const auto* const kCleanup = ::testing::AddGlobalTestEnvironment(new ScratchCleanup);

}  // namespace
