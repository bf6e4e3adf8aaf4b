#include "tvcl/task_vector.hpp"

#include <cmath>

#include "tvcl/ops.hpp"

namespace tvcl {

void MergeConfig::validate() const {
  if (!std::isfinite(lambda) || lambda < 0.0 || lambda > 2.0) {
    throw PreconditionError("merge config: lambda must lie in [0, 2]");
  }
  if (sweep && grid.empty()) throw PreconditionError("merge config: sweep requested with an empty grid");
}

TaskVector compute_task_vector(const PeftModule& phi, std::string source_task) {
  if (!phi.init_snapshot) throw IntegrityError("compute_task_vector: module has no init snapshot");
  const std::vector<float> live = flatten(phi.live);
  const std::vector<float> init = flatten(*phi.init_snapshot);
  if (live.size() != init.size()) throw IntegrityError("compute_task_vector: snapshot shape differs from live");
  TaskVector tau{phi.config, std::vector<float>(live.size()), std::move(source_task)};
  for (std::size_t i = 0; i < live.size(); ++i) tau.values[i] = live[i] - init[i];
  return tau;
}

TaskVector combine(std::span<const TaskVector> vectors, double lambda) {
  if (vectors.empty()) throw PreconditionError("combine: no task vectors");
  if (!std::isfinite(lambda)) throw PreconditionError("combine: lambda must be finite");
  const PeftConfig& config = vectors.front().config;
  const std::size_t n = vectors.front().values.size();
  for (const auto& v : vectors) {
    require_same_config(config, v.config, "combine");
    if (v.values.size() != n) throw IncompatibleModuleError("combine: task vectors differ in length");
  }
  std::vector<double> acc(n, 0.0);
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(v.values[i]);
  TaskVector out{config, std::vector<float>(n), "merged"};
  for (std::size_t i = 0; i < n; ++i) out.values[i] = static_cast<float>(lambda * acc[i]);
  return out;
}

ModelHandle apply(const Backbone& backbone, const PeftModule& anchor, const TaskVector& tau) {
  require_same_config(anchor.config, tau.config, "apply");
  if (!anchor.init_snapshot) throw IntegrityError("apply: anchor has no init snapshot");
  const std::vector<float> base = flatten(*anchor.init_snapshot);
  if (base.size() != tau.values.size()) throw IncompatibleModuleError("apply: task vector length mismatch");
  std::vector<float> merged(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) merged[i] = base[i] + tau.values[i];
  PeftModule module{anchor.config, unflatten(std::span<const float>(merged), anchor.config), anchor.init_snapshot,
                    anchor.lineage};
  return ModelHandle{&backbone, std::move(module)};
}

LambdaSweepResult lambda_sweep(std::span<const TaskVector> vectors, const PeftModule& anchor,
                               const Backbone& backbone, std::span<const TaskDataset> validation_sets,
                               std::span<const double> grid) {
  if (grid.empty()) throw PreconditionError("lambda_sweep: empty grid");
  if (validation_sets.empty()) throw PreconditionError("lambda_sweep: no validation sets");
  LambdaSweepResult result;
  double best_acc = -1.0;
  for (double lambda : grid) {
    const ModelHandle model = apply(backbone, anchor, combine(vectors, lambda));
    double sum = 0.0;
    for (const auto& vs : validation_sets) sum += evaluate(model, vs);
    const double avg = sum / static_cast<double>(validation_sets.size());
    result.table.emplace_back(lambda, avg);
    if (avg > best_acc || (avg == best_acc && lambda < result.best_lambda)) {
      best_acc = avg;
      result.best_lambda = lambda;
    }
  }
  return result;
}

Backbone fold_lora(const Backbone& backbone, const PeftModule& lora_module) {
  if (lora_module.config.kind != PeftKind::lora) {
    throw UnsupportedKindError("fold_lora: only LoRA attachments fold into the backbone");
  }
  lora_module.config.validate_against(backbone.config);
  Backbone folded = backbone;
  const float scale = static_cast<float>(lora_module.config.lora_scale());
  for (std::size_t i = 0; i < lora_module.config.target_layers.size(); ++i) {
    auto& layer = folded.layers[lora_module.config.target_layers[i]];
    const auto& w = lora_module.live.lora[i];
    ops::add_scaled_inplace(layer.w_q, ops::matmul(w.a_q, w.b_q), scale);
    ops::add_scaled_inplace(layer.w_v, ops::matmul(w.a_v, w.b_v), scale);
  }
  folded.freeze();
  return folded;
}

}  // namespace tvcl
