#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tvcl/backbone.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/runner.hpp"
#include "tvcl/synthetic.hpp"
#include "tvcl/task_vector.hpp"

namespace tvcl {

// Master seed of the reference suite used by the acceptance runs.
inline constexpr std::uint64_t kReferenceSuiteSeed = 20240901;

struct PretrainSettings {
  std::size_t steps = 2000;
  std::uint64_t seed = 7;
  PretrainOptions options;
};

struct SuiteSettings {
  std::uint64_t master_seed = kReferenceSuiteSeed;
  SuiteProfile profile = SuiteProfile::standard;
};

struct RunSettings {
  Method method = Method::ours_adapter;
  InitStrategy init_strategy = InitStrategy::pre;
  std::vector<std::vector<int>> orders = standard_orders();
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  std::size_t replay_per_class = 10;
  // Empty means <output_dir>/backbone.tvec.
  std::string backbone_path;
};

struct ExperimentConfig {
  BackboneConfig backbone;
  PretrainSettings pretrain;
  PeftConfig peft;
  TrainConfig train;
  MergeConfig merge;
  SuiteSettings suite;
  RunSettings run;

  std::filesystem::path output_dir() const { return run.output_dir; }
  std::filesystem::path backbone_file() const;
};

// Strict parse: unknown keys and wrong types raise ConfigError naming the
// field path (e.g. "train.learning_rte"). Missing keys take defaults.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Every field, defaults included.
nlohmann::json to_json(const ExperimentConfig& config);

// The PEFT config a method trains: ours_lora / ours_adapter force the kind.
PeftConfig peft_for_method(const ExperimentConfig& config, Method method);

// Raised when a command's input artifact is absent.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// Wraps a DivergenceError with the identifier of the run that diverged.
class RunDivergedError : public Error {
 public:
  RunDivergedError(std::string run_id, const std::string& what)
      : Error(run_id + ": " + what), run_id_(std::move(run_id)) {}
  const std::string& run_id() const noexcept { return run_id_; }

 private:
  std::string run_id_;
};

struct RunSpec {
  Method method = Method::ours_adapter;
  InitStrategy init = InitStrategy::pre;
  std::vector<int> order;  // empty for MTL
  std::uint64_t seed = 0;
  PeftConfig peft;
  MergeConfig merge;

  std::string id() const;
};

// Every (order, seed) run of the configured method; MTL ignores orders.
std::vector<RunSpec> plan_runs(const ExperimentConfig& config);

RunResult execute_run(const ExperimentConfig& config, const Suite& suite, const Backbone& backbone,
                      const RunSpec& spec);

// Runs `specs` on up to `jobs` threads; results come back in spec order.
std::vector<RunResult> execute_runs(const ExperimentConfig& config, const Suite& suite, const Backbone& backbone,
                                    const std::vector<RunSpec>& specs, std::size_t jobs);

Backbone load_backbone(const ExperimentConfig& config);

// Command entry points; each writes its outputs atomically under `out`.
void cmd_pretrain(const ExperimentConfig& config, const std::filesystem::path& out);
std::vector<RunReport> cmd_run(const ExperimentConfig& config, const std::filesystem::path& out, std::size_t jobs);

enum class SweepDimension { lambda, lora_rank, adapter_bottleneck };
SweepDimension sweep_dimension_from_string(const std::string& s);
std::string to_string(SweepDimension d);

struct SweepRow {
  double value = 0.0;
  double average_accuracy = 0.0;  // mean over the value's runs, in [0, 1]
};

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& config, SweepDimension dimension,
                                const std::vector<double>& values, const std::filesystem::path& out,
                                std::size_t jobs);

struct AblationRow {
  InitStrategy init = InitStrategy::noinit;
  double average_accuracy = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // noinit, pre, mean
  bool ordering_holds = false;    // pre >= mean >= noinit
};

AblationTable cmd_ablate_init(const ExperimentConfig& config, const std::filesystem::path& out, std::size_t jobs);

}  // namespace tvcl
