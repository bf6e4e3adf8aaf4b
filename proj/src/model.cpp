#include "tvcl/model.hpp"

namespace tvcl {

template <typename T>
BasicTensor<T> classify(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                        std::span<const TokenSequence> tokens) {
  auto fwd = backbone_forward(tokens, backbone, &phi);
  return ops::linear_forward(fwd.pooled, phi.live.head_w, phi.live.head_b);
}

template <typename T>
BasicTensor<T> classify_head_only(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                                  std::span<const TokenSequence> tokens) {
  auto fwd = backbone_forward<T>(tokens, backbone, nullptr);
  return ops::linear_forward(fwd.pooled, phi.live.head_w, phi.live.head_b);
}

template <typename T>
PeftLoss<T> peft_loss_and_grad(const BackboneParams<T>& backbone, const PeftParamSet<T>& phi,
                               std::span<const TokenSequence> tokens, std::span<const std::int32_t> labels,
                               std::span<const ops::ClassMask> row_masks) {
  auto fwd = backbone_forward(tokens, backbone, &phi);
  const BasicTensor<T> logits = ops::linear_forward(fwd.pooled, phi.live.head_w, phi.live.head_b);
  auto ce = ops::softmax_cross_entropy(logits, labels, row_masks);
  auto head = ops::linear_backward(fwd.pooled, phi.live.head_w, ce.grad_logits);
  PeftLoss<T> out{ce.loss, backbone_backward(backbone, &phi, fwd.cache, head.grad_x)};
  out.grads.head_w = std::move(head.grad_w);
  out.grads.head_b = std::move(head.grad_bias);
  return out;
}

#define TVCL_INSTANTIATE_MODEL(T)                                                                             \
  template BasicTensor<T> classify(const BackboneParams<T>&, const PeftParamSet<T>&,                          \
                                   std::span<const TokenSequence>);                                           \
  template BasicTensor<T> classify_head_only(const BackboneParams<T>&, const PeftParamSet<T>&,                \
                                             std::span<const TokenSequence>);                                 \
  template PeftLoss<T> peft_loss_and_grad(const BackboneParams<T>&, const PeftParamSet<T>&,                   \
                                          std::span<const TokenSequence>, std::span<const std::int32_t>,      \
                                          std::span<const ops::ClassMask>);

TVCL_INSTANTIATE_MODEL(float)
TVCL_INSTANTIATE_MODEL(double)

#undef TVCL_INSTANTIATE_MODEL

}  // namespace tvcl
