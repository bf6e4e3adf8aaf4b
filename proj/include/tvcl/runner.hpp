#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tvcl/backbone.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/synthetic.hpp"
#include "tvcl/task_vector.hpp"

namespace tvcl {

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  // Requires lr > 0 and epochs, batch_size >= 1. train_task itself also
  // accepts lr = 0, which leaves the module unchanged.
  void validate() const;
};

enum class Method { ours_lora, ours_adapter, ft, replay, mtl };
enum class InitStrategy { noinit, pre, mean };

std::string to_string(Method method);
Method method_from_string(const std::string& s);
std::string to_string(InitStrategy strategy);
InitStrategy init_strategy_from_string(const std::string& s);

struct RunReport {
  Method method = Method::ours_adapter;
  std::optional<std::vector<int>> order;  // absent for MTL
  std::map<std::string, double> per_task_accuracy;  // task id -> [0, 1]
  double average_accuracy = 0.0;
  std::optional<double> lambda_used;  // absent for methods that do not merge
  InitStrategy init_strategy = InitStrategy::noinit;
  std::vector<std::uint64_t> seeds;
  // Measured; the one field that differs between otherwise identical runs.
  double wall_time_seconds = 0.0;
};

// Everything a run produces; the report is the public record.
struct RunResult {
  RunReport report;
  // Accuracy of the live module on each task's test split right after that
  // task was trained (ours / FT / Replay only).
  std::map<std::string, double> just_trained_accuracy;
  std::vector<TaskVector> task_vectors;  // ours only, in training order
  std::vector<PeftModule> modules;       // ours: one per task; baselines: the final module
};

// One training example source: examples plus the class mask of each task
// index they reference.
struct TrainingSet {
  std::span<const Example> examples;
  std::span<const ops::ClassMask> task_masks;
};

// Mini-batch Adam on masked cross-entropy over phi.live. The snapshot and
// lineage are carried over unchanged. Optimizer state is fresh per call.
PeftModule train_task(const Backbone& backbone, const PeftModule& phi, const TrainingSet& train_set,
                      const TrainConfig& config);
PeftModule train_task(const Backbone& backbone, const PeftModule& phi, const TaskDataset& train_set,
                      const TrainConfig& config);

// As train_task, but every batch of current examples is followed by the same
// number of draws from `buffer` (uniform, with replacement) in one step.
PeftModule train_task_with_replay(const Backbone& backbone, const PeftModule& phi, const TrainingSet& train_set,
                                  std::span<const Example> buffer, const TrainConfig& config);

// Seed used to train task `task_number` in a run seeded with `run_seed`.
std::uint64_t task_train_seed(std::uint64_t run_seed, int task_number);
// Seed of the random module drawn for task `task_number`.
std::uint64_t task_init_seed(std::uint64_t run_seed, int task_number);

RunResult run_sequential(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                         const PeftConfig& peft, InitStrategy init, const TrainConfig& train,
                         const MergeConfig& merge);
RunResult run_ft_baseline(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                          const PeftConfig& peft, const TrainConfig& train);
RunResult run_replay_baseline(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                              const PeftConfig& peft, const TrainConfig& train, std::size_t per_class_buffer);
RunResult run_mtl_baseline(const Suite& suite, const Backbone& backbone, const PeftConfig& peft,
                           const TrainConfig& train);

// First `per_class` examples of every class seen in `tasks` (task order,
// then dataset order).
std::vector<Example> build_replay_buffer(const Suite& suite, std::span<const int> tasks, std::size_t per_class);

double aggregate_average(std::span<const double> values);
// Round half away from zero to one decimal.
double round_one_decimal(double x);
std::string format_one_decimal(double x);

nlohmann::json to_json(const RunReport& report);
RunReport run_report_from_json(const nlohmann::json& j);
std::string csv_header(std::size_t n_tasks = 5);
// One row per report; accuracies as percentages with one decimal.
std::string csv_row(const RunReport& report);

}  // namespace tvcl
