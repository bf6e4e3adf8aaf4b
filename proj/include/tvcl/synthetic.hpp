#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tvcl/backbone.hpp"
#include "tvcl/ops.hpp"

namespace tvcl {

struct Example {
  TokenSequence tokens;
  std::int32_t label = 0;  // index in the union label space
  std::int32_t task = 0;   // 0-based task index in the suite
};

enum class Split { train, val, test };

std::string to_string(Split split);

enum class SuiteProfile {
  standard,  // 400 / 100 / 200 examples per task
  smoke,     // small splits for fast end-to-end checks
};

std::string to_string(SuiteProfile profile);
SuiteProfile suite_profile_from_string(const std::string& s);

struct TaskSpec {
  std::string task_id;  // "t1" .. "t5"
  std::string name;
  std::size_t n_classes = 0;
  std::size_t class_offset = 0;
  std::size_t family = 0;
  // Half-open token-id range holding this task's class-indicative tokens.
  std::pair<std::int32_t, std::int32_t> vocab_slice{0, 0};
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

struct TaskDataset {
  TaskSpec spec;
  Split split = Split::train;
  std::vector<Example> examples;
};

struct TaskSplits {
  TaskDataset train, val, test;
  const TaskSpec& spec() const { return train.spec; }
};

struct Suite {
  std::uint64_t master_seed = 0;
  SuiteProfile profile = SuiteProfile::standard;
  std::size_t n_total_classes = 0;
  std::vector<TaskSplits> tasks;

  // Index of the task whose id is `task_number` (1-based).
  const TaskSplits& task(int task_number) const;
  // Mask with exactly the task's class range enabled.
  ops::ClassMask class_mask(std::size_t task_index) const;
};

// Fixed token layout of the suite vocabulary.
struct SuiteVocabulary {
  static constexpr std::int32_t kBackgroundBegin = 0;
  static constexpr std::int32_t kBackgroundCount = 60;
  static constexpr std::int32_t kFamilyBegin = 60;
  static constexpr std::int32_t kFamilyCount = 20;  // per family
  static constexpr std::int32_t kClassBegin = 100;
  static constexpr std::int32_t kTokensPerClass = 5;
  static constexpr std::size_t kMinVocab = 200;
  // Percent thresholds for the per-position token source.
  static constexpr std::uint64_t kClassPercent = 35;
  static constexpr std::uint64_t kFamilyPercent = 25;
  static constexpr std::size_t kMinLength = 8;
  static constexpr std::size_t kMaxLength = 24;
};

Suite generate_suite(std::uint64_t master_seed, SuiteProfile profile = SuiteProfile::standard);

// Three fixed task orders (1-based task numbers).
std::vector<std::vector<int>> standard_orders();
std::string order_to_string(const std::vector<int>& order);

// "task_id<TAB>label<TAB>space-separated token ids", one example per line.
void export_examples(std::ostream& out, const std::vector<TaskDataset>& sets);
std::vector<std::pair<std::string, Example>> import_examples(std::istream& in);

// Generic labelled corpus for backbone pre-training and probing. Token ids
// below `filler_end` are filler; the rest are content. Classes are disjoint
// token sets taken from a seeded permutation of the content ids. Indicative
// positions draw from the class's set, the others uniformly from the filler
// ids (or the whole vocabulary when filler_end is 0).
struct MixtureSpec {
  std::size_t vocab_size = 200;
  std::size_t filler_end = 0;
  std::size_t n_classes = 40;
  std::size_t tokens_per_class = 5;
  std::size_t min_length = SuiteVocabulary::kMinLength;
  std::size_t max_length = SuiteVocabulary::kMaxLength;
};

// Deterministic per (seed, index): example `i` is identical whatever the count.
std::vector<Example> generate_mixture(const MixtureSpec& spec, std::uint64_t seed, std::size_t first_index,
                                      std::size_t count);

}  // namespace tvcl
