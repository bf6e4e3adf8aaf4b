#include "tvcl/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "tvcl/evaluation.hpp"
#include "tvcl/model.hpp"
#include "tvcl/optimizer.hpp"
#include "tvcl/random.hpp"

namespace tvcl {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs", "must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train.learning_rate", "must be a positive finite number");
  }
}

std::string to_string(Method method) {
  switch (method) {
    case Method::ours_lora: return "ours_lora";
    case Method::ours_adapter: return "ours_adapter";
    case Method::ft: return "ft";
    case Method::replay: return "replay";
    case Method::mtl: return "mtl";
  }
  return "mtl";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::ours_lora, Method::ours_adapter, Method::ft, Method::replay, Method::mtl})
    if (to_string(m) == s) return m;
  throw PreconditionError("unknown method '" + s + "'");
}

std::string to_string(InitStrategy strategy) {
  switch (strategy) {
    case InitStrategy::noinit: return "noinit";
    case InitStrategy::pre: return "pre";
    case InitStrategy::mean: return "mean";
  }
  return "mean";
}

InitStrategy init_strategy_from_string(const std::string& s) {
  for (InitStrategy i : {InitStrategy::noinit, InitStrategy::pre, InitStrategy::mean})
    if (to_string(i) == s) return i;
  throw PreconditionError("unknown init strategy '" + s + "'");
}

namespace {

void check_train_args(const TrainConfig& config) {
  if (config.epochs < 1) throw PreconditionError("train_task: epochs must be at least 1");
  if (config.batch_size < 1) throw PreconditionError("train_task: batch_size must be at least 1");
  if (!(config.learning_rate >= 0.0) || !std::isfinite(config.learning_rate)) {
    throw PreconditionError("train_task: learning rate must be finite and non-negative");
  }
}

struct BatchInputs {
  std::vector<TokenSequence> tokens;
  std::vector<std::int32_t> labels;
  std::vector<ops::ClassMask> masks;

  void add(const Example& ex, std::span<const ops::ClassMask> task_masks) {
    if (ex.task < 0 || static_cast<std::size_t>(ex.task) >= task_masks.size()) {
      throw PreconditionError("train_task: example references task " + std::to_string(ex.task) +
                              " with no class mask");
    }
    tokens.push_back(ex.tokens);
    labels.push_back(ex.label);
    masks.push_back(task_masks[static_cast<std::size_t>(ex.task)]);
  }
  void clear() {
    tokens.clear();
    labels.clear();
    masks.clear();
  }
};

PeftModule train_impl(const Backbone& backbone, const PeftModule& phi, const TrainingSet& train_set,
                      std::span<const Example> buffer, const TrainConfig& config) {
  check_train_args(config);
  if (train_set.examples.empty()) throw PreconditionError("train_task: empty training set");
  if (!backbone.fingerprint_matches()) throw PreconditionError("train_task: backbone is not frozen");
  const std::uint64_t fingerprint = backbone.fingerprint;

  PeftModule out = phi;
  std::vector<float> flat = flatten(out.live);
  Adam adam(flat.size(), AdamOptions{config.learning_rate});

  const std::size_t n = train_set.examples.size();
  std::vector<std::size_t> perm(n);
  BatchInputs batch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    SplitMix64 rng(stream_key({config.seed, epoch}));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    SplitMix64 replay_rng(stream_key({config.seed, epoch, 0x7e9ULL}));

    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      const std::size_t end = std::min(n, start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.add(train_set.examples[perm[i]], train_set.task_masks);
      if (!buffer.empty()) {
        for (std::size_t i = start; i < end; ++i) batch.add(buffer[replay_rng.below(buffer.size())], train_set.task_masks);
      }
      PeftLoss<float> lg;
      try {
        lg = peft_loss_and_grad(backbone, out, batch.tokens, batch.labels, batch.masks);
      } catch (const NumericError& e) {
        throw DivergenceError(std::string("train_task: ") + e.what(), step);
      }
      if (!std::isfinite(lg.loss)) throw DivergenceError("train_task: non-finite loss", step);
      const std::vector<float> g = flatten(lg.grads);
      adam.step(std::span<float>(flat), std::span<const float>(g));
      out.live = unflatten(std::span<const float>(flat), out.config);
    }
  }
  if (backbone.fingerprint != fingerprint || !backbone.fingerprint_matches()) {
    throw IntegrityError("train_task: backbone changed during training");
  }
  return out;
}

std::vector<ops::ClassMask> all_task_masks(const Suite& suite) {
  std::vector<ops::ClassMask> masks;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t) masks.push_back(suite.class_mask(t));
  return masks;
}

ops::ClassMask union_mask(const Suite& suite, std::span<const int> tasks) {
  ops::ClassMask mask(suite.n_total_classes, false);
  for (int t : tasks) {
    const auto m = suite.class_mask(static_cast<std::size_t>(t - 1));
    for (std::size_t c = 0; c < m.size(); ++c) mask[c] = mask[c] || m[c];
  }
  return mask;
}

void check_order(const Suite& suite, const std::vector<int>& order) {
  std::vector<int> sorted = order;
  std::sort(sorted.begin(), sorted.end());
  bool ok = sorted.size() == suite.tasks.size();
  for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == static_cast<int>(i + 1);
  if (!ok) throw PreconditionError("order " + order_to_string(order) + " is not a permutation of the suite tasks");
}

TrainingSet training_set(const Suite& suite, int task_number, std::span<const ops::ClassMask> masks) {
  return {std::span<const Example>(suite.task(task_number).train.examples), masks};
}

// Evaluates one model on every task's test split and fills the report.
void fill_accuracies(RunReport& report, const Suite& suite, const ModelHandle& model) {
  std::vector<double> accs;
  for (const auto& t : suite.tasks) {
    const double acc = evaluate(model, t.test);
    report.per_task_accuracy[t.spec().task_id] = acc;
    accs.push_back(acc);
  }
  report.average_accuracy = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

PeftConfig head_sized(PeftConfig peft, const Suite& suite) {
  if (peft.head_classes != suite.n_total_classes) {
    throw PreconditionError("PEFT head has " + std::to_string(peft.head_classes) + " classes, suite has " +
                            std::to_string(suite.n_total_classes));
  }
  return peft;
}

}  // namespace

PeftModule train_task(const Backbone& backbone, const PeftModule& phi, const TrainingSet& train_set,
                      const TrainConfig& config) {
  return train_impl(backbone, phi, train_set, {}, config);
}

PeftModule train_task(const Backbone& backbone, const PeftModule& phi, const TaskDataset& train_set,
                      const TrainConfig& config) {
  const std::size_t n_classes = phi.config.head_classes;
  const TaskSpec& spec = train_set.spec;
  if (spec.class_offset + spec.n_classes > n_classes) {
    throw PreconditionError("train_task: task classes exceed the head size");
  }
  ops::ClassMask mask(n_classes, false);
  for (std::size_t c = 0; c < spec.n_classes; ++c) mask[spec.class_offset + c] = true;
  // Every example is routed through a single mask regardless of its task tag.
  std::vector<Example> examples = train_set.examples;
  for (auto& ex : examples) ex.task = 0;
  const std::vector<ops::ClassMask> masks{mask};
  return train_impl(backbone, phi, {examples, masks}, {}, config);
}

PeftModule train_task_with_replay(const Backbone& backbone, const PeftModule& phi, const TrainingSet& train_set,
                                  std::span<const Example> buffer, const TrainConfig& config) {
  return train_impl(backbone, phi, train_set, buffer, config);
}

std::uint64_t task_train_seed(std::uint64_t run_seed, int task_number) {
  return stream_key({run_seed, 0x7a5cULL, static_cast<std::uint64_t>(task_number)});
}

std::uint64_t task_init_seed(std::uint64_t run_seed, int task_number) {
  return stream_key({run_seed, 0x1417ULL, static_cast<std::uint64_t>(task_number)});
}

RunResult run_sequential(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                         const PeftConfig& peft_in, InitStrategy init, const TrainConfig& train,
                         const MergeConfig& merge) {
  const auto start = std::chrono::steady_clock::now();
  check_order(suite, order);
  merge.validate();
  const PeftConfig peft = head_sized(peft_in, suite);
  const auto masks = all_task_masks(suite);

  RunResult result;
  RunReport& report = result.report;
  report.method = peft.kind == PeftKind::lora ? Method::ours_lora : Method::ours_adapter;
  report.order = order;
  report.init_strategy = init;
  report.seeds = {train.seed};

  for (std::size_t i = 0; i < order.size(); ++i) {
    const int task = order[i];
    PeftModule phi;
    if (i == 0 || init == InitStrategy::noinit) {
      phi = init_random<float>(peft, task_init_seed(train.seed, task));
    } else if (init == InitStrategy::pre) {
      phi = init_pre(result.modules.back());
    } else {
      phi = init_mean(std::span<const PeftModule>(result.modules));
    }
    TrainConfig tc = train;
    tc.seed = task_train_seed(train.seed, task);
    PeftModule tuned = train_task(backbone, phi, training_set(suite, task, masks), tc);
    const TaskSplits& splits = suite.task(task);
    result.just_trained_accuracy[splits.spec().task_id] = evaluate(ModelHandle{&backbone, tuned}, splits.test);
    result.task_vectors.push_back(compute_task_vector(tuned, splits.spec().task_id));
    result.modules.push_back(std::move(tuned));
  }

  // Merge in ascending task order so the float sum does not depend on the
  // training order.
  std::vector<std::size_t> idx(order.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return order[a] < order[b]; });
  std::vector<TaskVector> sorted;
  for (std::size_t k : idx) sorted.push_back(result.task_vectors[k]);

  const PeftModule& anchor = result.modules.front();
  double lambda = merge.lambda;
  if (merge.sweep) {
    std::vector<TaskDataset> val;
    for (const auto& t : suite.tasks) val.push_back(t.val);
    lambda = lambda_sweep(sorted, anchor, backbone, val, merge.grid).best_lambda;
  }
  report.lambda_used = lambda;
  const ModelHandle merged = apply(backbone, anchor, combine(sorted, lambda));
  fill_accuracies(report, suite, merged);
  report.wall_time_seconds = seconds_since(start);
  return result;
}

RunResult run_ft_baseline(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                          const PeftConfig& peft, const TrainConfig& train) {
  return run_replay_baseline(suite, backbone, order, peft, train, 0);
}

RunResult run_replay_baseline(const Suite& suite, const Backbone& backbone, const std::vector<int>& order,
                              const PeftConfig& peft_in, const TrainConfig& train, std::size_t per_class_buffer) {
  const auto start = std::chrono::steady_clock::now();
  check_order(suite, order);
  const PeftConfig peft = head_sized(peft_in, suite);
  const auto masks = all_task_masks(suite);

  RunResult result;
  RunReport& report = result.report;
  report.method = per_class_buffer == 0 ? Method::ft : Method::replay;
  report.order = order;
  report.init_strategy = InitStrategy::noinit;
  report.seeds = {train.seed};

  // Same draw as the first module of a sequential run over `order`.
  PeftModule phi = init_random<float>(peft, task_init_seed(train.seed, order.front()));
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int task = order[i];
    TrainConfig tc = train;
    tc.seed = task_train_seed(train.seed, task);
    if (per_class_buffer == 0) {
      phi = train_task(backbone, phi, training_set(suite, task, masks), tc);
    } else {
      // Current and replayed examples compete over every class seen so far.
      const std::span<const int> seen(order.data(), i + 1);
      const std::vector<Example> buffer = build_replay_buffer(suite, seen.first(i), per_class_buffer);
      const std::vector<ops::ClassMask> seen_masks(suite.tasks.size(), union_mask(suite, seen));
      phi = train_task_with_replay(backbone, phi, training_set(suite, task, seen_masks), buffer, tc);
    }
    const TaskSplits& splits = suite.task(task);
    result.just_trained_accuracy[splits.spec().task_id] = evaluate(ModelHandle{&backbone, phi}, splits.test);
  }
  fill_accuracies(report, suite, ModelHandle{&backbone, phi});
  report.wall_time_seconds = seconds_since(start);
  result.modules.push_back(std::move(phi));
  return result;
}

RunResult run_mtl_baseline(const Suite& suite, const Backbone& backbone, const PeftConfig& peft_in,
                           const TrainConfig& train) {
  const auto start = std::chrono::steady_clock::now();
  const PeftConfig peft = head_sized(peft_in, suite);
  std::vector<Example> all;
  for (const auto& t : suite.tasks) all.insert(all.end(), t.train.examples.begin(), t.train.examples.end());

  RunResult result;
  RunReport& report = result.report;
  report.method = Method::mtl;
  report.init_strategy = InitStrategy::noinit;
  report.seeds = {train.seed};

  // Joint training: every example competes over the whole label space.
  std::vector<int> every(suite.tasks.size());
  std::iota(every.begin(), every.end(), 1);
  const std::vector<ops::ClassMask> masks(suite.tasks.size(), union_mask(suite, every));
  TrainConfig tc = train;
  tc.seed = task_train_seed(train.seed, 0);
  PeftModule phi = train_task(backbone, init_random<float>(peft, task_init_seed(train.seed, 0)),
                              TrainingSet{all, masks}, tc);
  fill_accuracies(report, suite, ModelHandle{&backbone, phi});
  report.wall_time_seconds = seconds_since(start);
  result.modules.push_back(std::move(phi));
  return result;
}

std::vector<Example> build_replay_buffer(const Suite& suite, std::span<const int> tasks, std::size_t per_class) {
  std::vector<Example> buffer;
  for (int task : tasks) {
    const TaskSplits& splits = suite.task(task);
    std::vector<std::size_t> taken(suite.n_total_classes, 0);
    for (const Example& ex : splits.train.examples) {
      auto& count = taken.at(static_cast<std::size_t>(ex.label));
      if (count < per_class) {
        buffer.push_back(ex);
        ++count;
      }
    }
  }
  return buffer;
}

double aggregate_average(std::span<const double> values) {
  if (values.empty()) throw PreconditionError("aggregate_average: empty list");
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

double round_one_decimal(double x) {
  // Snap to the nearest representable tenth first so that means such as
  // 222.6 / 3 are not pushed across a rounding boundary by float error.
  const double scaled = x * 10.0;
  const double snapped = std::round(scaled * 1e6) / 1e6;
  return std::round(snapped) / 10.0;
}

std::string format_one_decimal(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.1f", round_one_decimal(x));
  return buf;
}

json to_json(const RunReport& r) {
  json j;
  j["method"] = to_string(r.method);
  if (r.order) {
    json order = json::array();
    for (int t : *r.order) order.push_back("t" + std::to_string(t));
    j["order"] = order;
  } else {
    j["order"] = nullptr;
  }
  j["per_task_accuracy"] = r.per_task_accuracy;
  j["average_accuracy"] = r.average_accuracy;
  j["lambda_used"] = r.lambda_used ? json(*r.lambda_used) : json(nullptr);
  j["init_strategy"] = to_string(r.init_strategy);
  j["seeds"] = r.seeds;
  j["wall_time_seconds"] = r.wall_time_seconds;
  return j;
}

RunReport run_report_from_json(const json& j) {
  RunReport r;
  try {
    r.method = method_from_string(j.at("method").get<std::string>());
    if (!j.at("order").is_null()) {
      std::vector<int> order;
      for (const auto& t : j.at("order")) order.push_back(std::stoi(t.get<std::string>().substr(1)));
      r.order = order;
    }
    r.per_task_accuracy = j.at("per_task_accuracy").get<std::map<std::string, double>>();
    r.average_accuracy = j.at("average_accuracy").get<double>();
    if (!j.at("lambda_used").is_null()) r.lambda_used = j.at("lambda_used").get<double>();
    r.init_strategy = init_strategy_from_string(j.at("init_strategy").get<std::string>());
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.wall_time_seconds = j.at("wall_time_seconds").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("run report: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError("run report: bad task id in order");
  }
  return r;
}

std::string csv_header(std::size_t n_tasks) {
  std::string h = "method,order,seed,init_strategy,lambda";
  for (std::size_t t = 1; t <= n_tasks; ++t) h += ",t" + std::to_string(t);
  return h + ",average\n";
}

std::string csv_row(const RunReport& r) {
  std::string row = to_string(r.method) + ",";
  if (r.order) row += order_to_string(*r.order);
  row += ",";
  for (std::size_t i = 0; i < r.seeds.size(); ++i) row += (i ? ";" : "") + std::to_string(r.seeds[i]);
  row += "," + to_string(r.init_strategy) + ",";
  if (r.lambda_used) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", *r.lambda_used);
    row += buf;
  }
  for (const auto& [id, acc] : r.per_task_accuracy) row += "," + format_one_decimal(100.0 * acc);
  row += "," + format_one_decimal(100.0 * r.average_accuracy) + "\n";
  return row;
}

}  // namespace tvcl
