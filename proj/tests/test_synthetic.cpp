#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "tvcl/error.hpp"
#include "tvcl/synthetic.hpp"

using namespace tvcl;

namespace {

const Suite& reference() {
  static const Suite suite = generate_suite(20240901);
  return suite;
}

bool same_examples(const std::vector<Example>& a, const std::vector<Example>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tokens != b[i].tokens || a[i].label != b[i].label || a[i].task != b[i].task) return false;
  }
  return true;
}

// Predicts the class of the task whose indicative tokens occur most often;
// ties go to the lowest class.
std::int32_t count_oracle(const Example& e, const TaskSpec& spec) {
  std::int32_t best = -1;
  int best_count = -1;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    const auto c = static_cast<std::int32_t>(spec.class_offset + k);
    const std::int32_t lo = SuiteVocabulary::kClassBegin + SuiteVocabulary::kTokensPerClass * c;
    const std::int32_t hi = lo + SuiteVocabulary::kTokensPerClass;
    const int count = static_cast<int>(
        std::count_if(e.tokens.begin(), e.tokens.end(), [&](std::int32_t t) { return t >= lo && t < hi; }));
    if (count > best_count) best = c, best_count = count;
  }
  return best;
}

}  // namespace

TEST(Suite, Deterministic) {
  const auto again = generate_suite(20240901);
  ASSERT_EQ(again.tasks.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_TRUE(same_examples(again.tasks[t].train.examples, reference().tasks[t].train.examples));
    EXPECT_TRUE(same_examples(again.tasks[t].val.examples, reference().tasks[t].val.examples));
    EXPECT_TRUE(same_examples(again.tasks[t].test.examples, reference().tasks[t].test.examples));
  }
  const auto other = generate_suite(20240902);
  EXPECT_FALSE(same_examples(other.tasks[0].train.examples, reference().tasks[0].train.examples));
}

TEST(Suite, ClassLayout) {
  const auto& s = reference();
  EXPECT_EQ(s.n_total_classes, 20u);
  const std::vector<std::size_t> counts{4, 3, 3, 5, 5};
  std::size_t offset = 0;
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& spec = s.tasks[t].spec();
    EXPECT_EQ(spec.task_id, "t" + std::to_string(t + 1));
    EXPECT_EQ(spec.n_classes, counts[t]);
    EXPECT_EQ(spec.class_offset, offset);
    offset += spec.n_classes;
    EXPECT_EQ(&s.task(static_cast<int>(t + 1)), &s.tasks[t]);
    const auto mask = s.class_mask(t);
    ASSERT_EQ(mask.size(), 20u);
    for (std::size_t c = 0; c < 20; ++c) {
      EXPECT_EQ(mask[c], c >= spec.class_offset && c < spec.class_offset + spec.n_classes);
    }
  }
  EXPECT_EQ(offset, 20u);
  EXPECT_EQ(s.tasks[1].spec().family, s.tasks[2].spec().family);
  EXPECT_NE(s.tasks[0].spec().family, s.tasks[1].spec().family);
  EXPECT_THROW(s.task(6), PreconditionError);
}

TEST(Suite, SplitSizesAndExampleInvariants) {
  for (std::size_t t = 0; t < 5; ++t) {
    const auto& task = reference().tasks[t];
    EXPECT_EQ(task.train.examples.size(), 400u);
    EXPECT_EQ(task.val.examples.size(), 100u);
    EXPECT_EQ(task.test.examples.size(), 200u);
    EXPECT_EQ(task.train.split, Split::train);
    EXPECT_EQ(task.val.split, Split::val);
    EXPECT_EQ(task.test.split, Split::test);
    const auto& spec = task.spec();
    std::set<std::int32_t> labels;
    for (const auto* set : {&task.train, &task.val, &task.test}) {
      for (const auto& e : set->examples) {
        EXPECT_GE(e.label, static_cast<std::int32_t>(spec.class_offset));
        EXPECT_LT(e.label, static_cast<std::int32_t>(spec.class_offset + spec.n_classes));
        EXPECT_GE(e.tokens.size(), SuiteVocabulary::kMinLength);
        EXPECT_LE(e.tokens.size(), SuiteVocabulary::kMaxLength);
        EXPECT_EQ(e.task, static_cast<std::int32_t>(t));
        for (auto tok : e.tokens) {
          EXPECT_GE(tok, 0);
          EXPECT_LT(tok, static_cast<std::int32_t>(SuiteVocabulary::kMinVocab));
        }
        labels.insert(e.label);
      }
    }
    EXPECT_EQ(labels.size(), spec.n_classes);
  }
}

TEST(Suite, SplitsAreDisjoint) {
  for (const auto& task : reference().tasks) {
    std::set<TokenSequence> seen;
    std::size_t total = 0;
    for (const auto* set : {&task.train, &task.val, &task.test}) {
      for (const auto& e : set->examples) seen.insert(e.tokens), ++total;
    }
    EXPECT_EQ(seen.size(), total);
  }
}

TEST(Suite, CountOracleLearnability) {
  for (const auto& task : reference().tasks) {
    std::size_t correct = 0;
    for (const auto& e : task.test.examples) correct += count_oracle(e, task.spec()) == e.label;
    EXPECT_GE(static_cast<double>(correct) / task.test.examples.size(), 0.8) << task.spec().task_id;
  }
}

TEST(Suite, SmokeProfileIsSmaller) {
  const auto smoke = generate_suite(5, SuiteProfile::smoke);
  EXPECT_EQ(smoke.profile, SuiteProfile::smoke);
  ASSERT_EQ(smoke.tasks.size(), 5u);
  EXPECT_LT(smoke.tasks[0].train.examples.size(), 400u);
  EXPECT_GT(smoke.tasks[0].train.examples.size(), 0u);
  EXPECT_EQ(suite_profile_from_string("smoke"), SuiteProfile::smoke);
  EXPECT_EQ(to_string(SuiteProfile::standard), "default");
}

TEST(Orders, StandardOrders) {
  const auto orders = standard_orders();
  ASSERT_EQ(orders.size(), 3u);
  EXPECT_EQ(orders[0], (std::vector<int>{1, 2, 3, 4, 5}));
  EXPECT_EQ(orders[1], (std::vector<int>{5, 4, 3, 2, 1}));
  EXPECT_EQ(orders[2], (std::vector<int>{3, 5, 1, 4, 2}));
  for (auto o : orders) {
    std::sort(o.begin(), o.end());
    EXPECT_EQ(o, (std::vector<int>{1, 2, 3, 4, 5}));
  }
  EXPECT_NE(orders[0], orders[1]);
  EXPECT_NE(orders[0], orders[2]);
  EXPECT_NE(orders[1], orders[2]);
  EXPECT_EQ(order_to_string(orders[2]), "3-5-1-4-2");
}

TEST(Orders, FirstOrderFollowsDatasetSequence) {
  const auto& s = reference();
  // Stand-ins for ag news, yelp, amazon, yahoo and dbpedia.
  const std::vector<std::string> names{"news", "business_reviews", "product_reviews", "answers", "encyclopedia"};
  const auto order = standard_orders()[0];
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(s.task(order[i]).spec().name, names[i]);
}

TEST(Export, RoundTrip) {
  const auto& s = reference();
  const std::vector<TaskDataset> sets{s.tasks[0].test, s.tasks[3].val};
  std::ostringstream out;
  export_examples(out, sets);
  const std::string text = out.str();
  const auto first_line = text.substr(0, text.find('\n'));
  const auto& e0 = sets[0].examples[0];
  std::string expect = "t1\t" + std::to_string(e0.label) + "\t";
  for (std::size_t i = 0; i < e0.tokens.size(); ++i) expect += (i ? " " : "") + std::to_string(e0.tokens[i]);
  EXPECT_EQ(first_line, expect);

  std::istringstream in(text);
  const auto back = import_examples(in);
  ASSERT_EQ(back.size(), 300u);
  EXPECT_EQ(back[0].first, "t1");
  EXPECT_EQ(back[0].second.tokens, e0.tokens);
  EXPECT_EQ(back[0].second.label, e0.label);
  EXPECT_EQ(back[250].first, "t4");
  EXPECT_EQ(back[250].second.tokens, sets[1].examples[50].tokens);
}

TEST(Export, MalformedLineRejected) {
  std::istringstream in("t1\tx\t1 2 3\n");
  EXPECT_ANY_THROW(import_examples(in));
  std::istringstream missing("t1\t3\n");
  EXPECT_ANY_THROW(import_examples(missing));
}

TEST(Mixture, DeterministicPerIndex) {
  MixtureSpec spec;
  spec.filler_end = 100;
  spec.n_classes = 10;
  spec.tokens_per_class = 3;
  const auto all = generate_mixture(spec, 9, 0, 10);
  const auto tail = generate_mixture(spec, 9, 5, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(tail[i].tokens, all[5 + i].tokens);
    EXPECT_EQ(tail[i].label, all[5 + i].label);
  }
  for (const auto& e : all) {
    EXPECT_GE(e.label, 0);
    EXPECT_LT(e.label, 10);
  }
}

TEST(Mixture, RejectsOversizedClassSets) {
  MixtureSpec spec;
  spec.filler_end = 150;
  spec.n_classes = 20;
  spec.tokens_per_class = 3;
  EXPECT_THROW(generate_mixture(spec, 1, 0, 1), PreconditionError);
}
