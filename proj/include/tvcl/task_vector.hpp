#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tvcl/backbone.hpp"
#include "tvcl/evaluation.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/synthetic.hpp"

namespace tvcl {

// τ = flatten(tuned) − flatten(init), in canonical flatten order.
struct TaskVector {
  PeftConfig config;
  std::vector<float> values;
  std::string source_task;
  std::string anchor_note = "per-module-init";
};

struct MergeConfig {
  double lambda = 0.25;
  // Pick λ on the validation splits instead of using `lambda`.
  bool sweep = false;
  std::vector<double> grid{0.1, 0.25, 0.5, 0.75, 1.0};

  void validate() const;
};

TaskVector compute_task_vector(const PeftModule& phi, std::string source_task = {});

// λ·Σ τ_i, accumulated in double in the order given, stored as float.
TaskVector combine(std::span<const TaskVector> vectors, double lambda);
inline TaskVector combine(std::span<const TaskVector> vectors, const MergeConfig& merge) {
  merge.validate();
  return combine(vectors, merge.lambda);
}

// Binds unflatten(flatten(anchor.init) + τ) to the frozen backbone. The
// merged module keeps the anchor's init as its snapshot.
ModelHandle apply(const Backbone& backbone, const PeftModule& anchor, const TaskVector& tau);

struct LambdaSweepResult {
  double best_lambda = 0.0;
  // (λ, mean validation accuracy) in grid order.
  std::vector<std::pair<double, double>> table;
};

LambdaSweepResult lambda_sweep(std::span<const TaskVector> vectors, const PeftModule& anchor,
                               const Backbone& backbone, std::span<const TaskDataset> validation_sets,
                               std::span<const double> grid);

// W_q, W_v ← W + (alpha/r)·A·B for every targeted layer.
Backbone fold_lora(const Backbone& backbone, const PeftModule& lora_module);

}  // namespace tvcl
