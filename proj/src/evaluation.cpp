#include "tvcl/evaluation.hpp"

#include <algorithm>

#include "tvcl/model.hpp"

namespace tvcl {

namespace {
constexpr std::size_t kEvalBatch = 64;
}

Tensor ModelHandle::logits(std::span<const TokenSequence> tokens) const {
  if (!backbone) throw PreconditionError("ModelHandle: no backbone bound");
  return classify(*backbone, module, tokens);
}

std::size_t argmax_row(std::span<const float> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

double evaluate(const ModelHandle& model, std::span<const Example> examples) {
  if (examples.empty()) throw PreconditionError("evaluate: empty test set");
  std::size_t correct = 0;
  std::vector<TokenSequence> batch;
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    const std::size_t end = std::min(examples.size(), start + kEvalBatch);
    batch.clear();
    for (std::size_t i = start; i < end; ++i) batch.push_back(examples[i].tokens);
    const Tensor logits = model.logits(batch);
    for (std::size_t i = start; i < end; ++i) {
      if (static_cast<std::int32_t>(argmax_row(logits.row(i - start))) == examples[i].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double evaluate(const ModelHandle& model, const TaskDataset& test_set) {
  return evaluate(model, std::span<const Example>(test_set.examples));
}

}  // namespace tvcl
