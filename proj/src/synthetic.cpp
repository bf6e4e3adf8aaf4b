#include "tvcl/synthetic.hpp"

#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "tvcl/random.hpp"

namespace tvcl {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::string to_string(SuiteProfile profile) { return profile == SuiteProfile::smoke ? "smoke" : "default"; }

SuiteProfile suite_profile_from_string(const std::string& s) {
  if (s == "default") return SuiteProfile::standard;
  if (s == "smoke") return SuiteProfile::smoke;
  throw PreconditionError("unknown suite profile '" + s + "'");
}

namespace {

struct TaskLayout {
  const char* name;
  std::size_t n_classes;
  std::size_t family;  // 0 = topic, 1 = sentiment
};

// Two families: topic (1, 4, 5) and sentiment (2, 3).
constexpr TaskLayout kTasks[] = {
    {"news", 4, 0}, {"business_reviews", 3, 1}, {"product_reviews", 3, 1}, {"answers", 5, 0}, {"encyclopedia", 5, 0},
};

std::uint64_t split_tag(Split s) { return static_cast<std::uint64_t>(s) + 1; }

using V = SuiteVocabulary;

TokenSequence sample_sequence(SplitMix64& rng, std::size_t class_index, std::size_t family) {
  const std::size_t span = V::kMaxLength - V::kMinLength + 1;
  const std::size_t len = V::kMinLength + static_cast<std::size_t>(rng.below(span));
  TokenSequence seq(len);
  const std::int32_t class_base = V::kClassBegin + static_cast<std::int32_t>(class_index) * V::kTokensPerClass;
  const std::int32_t family_base = V::kFamilyBegin + static_cast<std::int32_t>(family) * V::kFamilyCount;
  for (auto& tok : seq) {
    const std::uint64_t u = rng.below(100);
    if (u < V::kClassPercent) {
      tok = class_base + static_cast<std::int32_t>(rng.below(V::kTokensPerClass));
    } else if (u < V::kClassPercent + V::kFamilyPercent) {
      tok = family_base + static_cast<std::int32_t>(rng.below(V::kFamilyCount));
    } else {
      tok = V::kBackgroundBegin + static_cast<std::int32_t>(rng.below(V::kBackgroundCount));
    }
  }
  return seq;
}

}  // namespace

const TaskSplits& Suite::task(int task_number) const {
  if (task_number < 1 || static_cast<std::size_t>(task_number) > tasks.size()) {
    throw PreconditionError("unknown task number " + std::to_string(task_number));
  }
  return tasks[static_cast<std::size_t>(task_number - 1)];
}

ops::ClassMask Suite::class_mask(std::size_t task_index) const {
  const TaskSpec& spec = tasks.at(task_index).spec();
  ops::ClassMask mask(n_total_classes, false);
  for (std::size_t c = 0; c < spec.n_classes; ++c) mask[spec.class_offset + c] = true;
  return mask;
}

Suite generate_suite(std::uint64_t master_seed, SuiteProfile profile) {
  Suite suite;
  suite.master_seed = master_seed;
  suite.profile = profile;
  const std::size_t n_train = profile == SuiteProfile::smoke ? 48 : 400;
  const std::size_t n_val = profile == SuiteProfile::smoke ? 24 : 100;
  const std::size_t n_test = profile == SuiteProfile::smoke ? 24 : 200;

  std::size_t offset = 0;
  for (std::size_t t = 0; t < std::size(kTasks); ++t) {
    TaskSpec spec;
    spec.task_id = "t" + std::to_string(t + 1);
    spec.name = kTasks[t].name;
    spec.n_classes = kTasks[t].n_classes;
    spec.class_offset = offset;
    spec.family = kTasks[t].family;
    spec.vocab_slice = {V::kClassBegin + static_cast<std::int32_t>(offset) * V::kTokensPerClass,
                        V::kClassBegin + static_cast<std::int32_t>(offset + spec.n_classes) * V::kTokensPerClass};
    spec.n_train = n_train;
    spec.n_val = n_val;
    spec.n_test = n_test;
    offset += spec.n_classes;

    // One seen-set per task keeps the three splits disjoint.
    std::set<TokenSequence> seen;
    auto make_split = [&](Split split, std::size_t count) {
      TaskDataset ds{spec, split, {}};
      ds.examples.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::size_t local_class = i % spec.n_classes;
        SplitMix64 rng(stream_key({master_seed, t, split_tag(split), i}));
        TokenSequence seq = sample_sequence(rng, spec.class_offset + local_class, spec.family);
        while (!seen.insert(seq).second) seq = sample_sequence(rng, spec.class_offset + local_class, spec.family);
        ds.examples.push_back({std::move(seq), static_cast<std::int32_t>(spec.class_offset + local_class),
                               static_cast<std::int32_t>(t)});
      }
      return ds;
    };
    TaskSplits splits;
    splits.train = make_split(Split::train, n_train);
    splits.val = make_split(Split::val, n_val);
    splits.test = make_split(Split::test, n_test);
    suite.tasks.push_back(std::move(splits));
  }
  suite.n_total_classes = offset;
  return suite;
}

std::vector<std::vector<int>> standard_orders() {
  return {{1, 2, 3, 4, 5}, {5, 4, 3, 2, 1}, {3, 5, 1, 4, 2}};
}

std::string order_to_string(const std::vector<int>& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) s += "-";
    s += std::to_string(order[i]);
  }
  return s;
}

void export_examples(std::ostream& out, const std::vector<TaskDataset>& sets) {
  for (const auto& ds : sets) {
    for (const auto& ex : ds.examples) {
      out << ds.spec.task_id << '\t' << ex.label << '\t';
      for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
        if (i) out << ' ';
        out << ex.tokens[i];
      }
      out << '\n';
    }
  }
}

std::vector<std::pair<std::string, Example>> import_examples(std::istream& in) {
  std::vector<std::pair<std::string, Example>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) throw FormatError("example line " + std::to_string(line_no) + ": expected 3 fields");
    Example ex;
    std::string task_id = line.substr(0, tab1);
    try {
      ex.label = std::stoi(line.substr(tab1 + 1, tab2 - tab1 - 1));
    } catch (const std::exception&) {
      throw FormatError("example line " + std::to_string(line_no) + ": bad label");
    }
    std::istringstream toks(line.substr(tab2 + 1));
    std::int32_t id;
    while (toks >> id) ex.tokens.push_back(id);
    if (!toks.eof()) throw FormatError("example line " + std::to_string(line_no) + ": bad token id");
    if (task_id.size() > 1 && task_id[0] == 't') ex.task = std::stoi(task_id.substr(1)) - 1;
    out.emplace_back(std::move(task_id), std::move(ex));
  }
  return out;
}

std::vector<Example> generate_mixture(const MixtureSpec& spec, std::uint64_t seed, std::size_t first_index,
                                      std::size_t count) {
  if (spec.filler_end >= spec.vocab_size ||
      spec.n_classes * spec.tokens_per_class > spec.vocab_size - spec.filler_end) {
    throw PreconditionError("generate_mixture: class token sets exceed the content vocabulary");
  }
  if (spec.min_length == 0 || spec.min_length > spec.max_length) {
    throw PreconditionError("generate_mixture: bad length range");
  }
  std::vector<std::int32_t> perm(spec.vocab_size - spec.filler_end);
  std::iota(perm.begin(), perm.end(), static_cast<std::int32_t>(spec.filler_end));
  const std::size_t filler = spec.filler_end == 0 ? spec.vocab_size : spec.filler_end;
  SplitMix64 shuffle(stream_key({seed, 0x5eedULL}));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);

  std::vector<Example> out;
  out.reserve(count);
  const std::size_t span = spec.max_length - spec.min_length + 1;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t idx = first_index + k;
    SplitMix64 rng(stream_key({seed, 0xe8ULL, idx}));
    const std::size_t label = static_cast<std::size_t>(rng.below(spec.n_classes));
    const std::size_t len = spec.min_length + static_cast<std::size_t>(rng.below(span));
    Example ex;
    ex.label = static_cast<std::int32_t>(label);
    ex.tokens.resize(len);
    for (auto& tok : ex.tokens) {
      if (rng.below(100) < V::kClassPercent) {
        tok = perm[label * spec.tokens_per_class + static_cast<std::size_t>(rng.below(spec.tokens_per_class))];
      } else {
        tok = static_cast<std::int32_t>(rng.below(filler));
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace tvcl
