#pragma once

#include <cstdint>
#include <span>

#include "tvcl/backbone.hpp"
#include "tvcl/ops.hpp"
#include "tvcl/peft.hpp"

namespace tvcl {

// Frozen backbone + one PEFT module (body attachment and classifier head).
template <typename T>
BasicTensor<T> classify(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                        std::span<const TokenSequence> tokens);

// Head only, no body attachment; used to compare against folded backbones.
template <typename T>
BasicTensor<T> classify_head_only(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                                  std::span<const TokenSequence> tokens);

template <typename T>
struct PeftLoss {
  double loss = 0.0;
  PeftParams<T> grads;
};

// Masked cross-entropy of classify() and its gradient wrt phi.live.
template <typename T>
PeftLoss<T> peft_loss_and_grad(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                               std::span<const TokenSequence> tokens, std::span<const std::int32_t> labels,
                               std::span<const ops::ClassMask> row_masks);

}  // namespace tvcl
