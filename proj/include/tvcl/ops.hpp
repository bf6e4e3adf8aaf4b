#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tvcl/tensor.hpp"

// Forward/backward kernels shared by the backbone and the PEFT modules.
// Every reduction runs in a fixed loop order so results are bit-reproducible.
namespace tvcl::ops {

using ClassMask = std::vector<bool>;

template <typename T>
void ensure_finite(const BasicTensor<T>& t, const char* what);

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// aᵀ·b without materializing the transpose.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

// a·bᵀ without materializing the transpose.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a);

template <typename T>
BasicTensor<T> column_sum(const BasicTensor<T>& a);

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src);

template <typename T>
void add_scaled_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src, T scale);

template <typename T>
void add_row_broadcast(BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);

template <typename T>
struct LinearGrads {
  BasicTensor<T> grad_x;
  BasicTensor<T> grad_w;
  BasicTensor<T> grad_bias;
};

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& grad_out);

template <typename T>
struct LayerNormCache {
  BasicTensor<T> x_hat;
  std::vector<T> inv_std;
  BasicTensor<T> gain;
};

template <typename T>
struct LayerNormResult {
  BasicTensor<T> y;
  LayerNormCache<T> cache;
};

template <typename T>
LayerNormResult<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                                      const BasicTensor<T>& shift, T eps);

template <typename T>
struct LayerNormGrads {
  BasicTensor<T> grad_x;
  BasicTensor<T> grad_gain;
  BasicTensor<T> grad_shift;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNormCache<T>& cache, const BasicTensor<T>& grad_out);

// tanh-approximated GELU.
template <typename T>
BasicTensor<T> gelu_forward(const BasicTensor<T>& u);

template <typename T>
BasicTensor<T> gelu_backward(const BasicTensor<T>& u, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& u);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& u, const BasicTensor<T>& grad_out);

// Multi-head scaled dot-product self-attention over a ragged batch.
// q, k, v hold all tokens of all sequences stacked row-wise; offsets has
// one entry per sequence plus a final sentinel equal to the row count.
template <typename T>
struct AttentionCache {
  // Per (sequence, head): row-major len×len softmax probabilities.
  std::vector<std::vector<T>> probs;
};

template <typename T>
struct AttentionResult {
  BasicTensor<T> out;
  AttentionCache<T> cache;
};

template <typename T>
AttentionResult<T> attention_forward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                     std::span<const std::size_t> offsets, std::size_t n_heads);

template <typename T>
struct AttentionGrads {
  BasicTensor<T> grad_q;
  BasicTensor<T> grad_k;
  BasicTensor<T> grad_v;
};

template <typename T>
AttentionGrads<T> attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                     const AttentionCache<T>& cache, const BasicTensor<T>& grad_out,
                                     std::span<const std::size_t> offsets, std::size_t n_heads);

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  BasicTensor<T> grad_logits;
};

// Mean masked cross-entropy. Masked classes behave as if their logit were -inf.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                            const ClassMask& class_mask);

// Same, with an individual mask for every row.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                            std::span<const ClassMask> row_masks);

}  // namespace tvcl::ops
