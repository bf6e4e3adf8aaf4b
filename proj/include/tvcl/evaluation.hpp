#pragma once

#include <span>

#include "tvcl/backbone.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/synthetic.hpp"

namespace tvcl {

// A frozen backbone bound to one PEFT module. Cheap to copy; does not own
// the backbone.
struct ModelHandle {
  const Backbone* backbone = nullptr;
  PeftModule module;

  Tensor logits(std::span<const TokenSequence> tokens) const;
};

// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_row(std::span<const float> row);

// Fraction of examples whose argmax over every class (no task mask) equals
// the label.
double evaluate(const ModelHandle& model, const TaskDataset& test_set);
double evaluate(const ModelHandle& model, std::span<const Example> examples);

}  // namespace tvcl
