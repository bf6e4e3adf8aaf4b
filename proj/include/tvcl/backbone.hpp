#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tvcl/backbone_config.hpp"
#include "tvcl/ops.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/tensor.hpp"

namespace tvcl {

using TokenSequence = std::vector<std::int32_t>;

template <typename T>
struct EncoderLayerParams {
  BasicTensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  BasicTensor<T> ln1_gain, ln1_shift;
  BasicTensor<T> w_1, b_1, w_2, b_2;
  BasicTensor<T> ln2_gain, ln2_shift;

  template <typename F>
  void for_each(const std::string& prefix, F&& f) {
    for_each_impl(*this, prefix, f);
  }
  template <typename F>
  void for_each(const std::string& prefix, F&& f) const {
    for_each_impl(*this, prefix, f);
  }

 private:
  template <typename Self, typename F>
  static void for_each_impl(Self& s, const std::string& p, F& f) {
    f(p + "w_q", s.w_q);
    f(p + "b_q", s.b_q);
    f(p + "w_k", s.w_k);
    f(p + "b_k", s.b_k);
    f(p + "w_v", s.w_v);
    f(p + "b_v", s.b_v);
    f(p + "w_o", s.w_o);
    f(p + "b_o", s.b_o);
    f(p + "ln1_gain", s.ln1_gain);
    f(p + "ln1_shift", s.ln1_shift);
    f(p + "w_1", s.w_1);
    f(p + "b_1", s.b_1);
    f(p + "w_2", s.w_2);
    f(p + "b_2", s.b_2);
    f(p + "ln2_gain", s.ln2_gain);
    f(p + "ln2_shift", s.ln2_shift);
  }
};

// Θ: the frozen encoder shared by every task.
template <typename T>
struct BackboneParams {
  BackboneConfig config;
  BasicTensor<T> token_embedding;     // vocab × d_model
  BasicTensor<T> position_embedding;  // max_seq_len × d_model
  std::vector<EncoderLayerParams<T>> layers;
  // Content hash of all weight bytes, taken at freeze time.
  std::uint64_t fingerprint = 0;

  // Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1.
  static BackboneParams random(const BackboneConfig& config, std::uint64_t seed);
  static BackboneParams zeros(const BackboneConfig& config);

  template <typename F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  std::uint64_t compute_fingerprint() const;
  void freeze() { fingerprint = compute_fingerprint(); }
  bool fingerprint_matches() const { return fingerprint == compute_fingerprint(); }

  template <typename U>
  BackboneParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void for_each_impl(Self& s, F& f) {
    f(std::string("token_embedding"), s.token_embedding);
    f(std::string("position_embedding"), s.position_embedding);
    for (std::size_t l = 0; l < s.layers.size(); ++l) s.layers[l].for_each("layer" + std::to_string(l) + ".", f);
  }
};

using Backbone = BackboneParams<float>;

template <typename T>
struct LayerCache {
  BasicTensor<T> x_in;
  BasicTensor<T> q, k, v;
  BasicTensor<T> xa_q, xa_v;  // LoRA only: x·A
  ops::AttentionCache<T> attention;
  BasicTensor<T> attn_concat;
  ops::LayerNormCache<T> ln1;
  BasicTensor<T> h1;
  BasicTensor<T> ff_pre;  // h1·W1 + b1
  BasicTensor<T> ff_act;  // gelu(ff_pre)
  BasicTensor<T> ff_out;  // before the adapter
  BasicTensor<T> adapter_pre;  // adapter only
  BasicTensor<T> adapter_act;
  ops::LayerNormCache<T> ln2;
};

template <typename T>
struct BackboneCache {
  std::vector<TokenSequence> tokens;
  std::vector<std::size_t> offsets;
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct BackboneOutput {
  BasicTensor<T> pooled;  // batch × d_model
  BackboneCache<T> cache;
};

// Encoder forward with optional PEFT attachment, mean-pooled per sequence.
template <typename T>
BackboneOutput<T> backbone_forward(std::span<const TokenSequence> tokens, const BackboneParams<T>& params,
                                   const PeftParamSet<T>* attachment = nullptr);

// Reverse pass from d(pooled). Returns gradients for the attachment's body
// blocks (head tensors are left zero). When `backbone_grads` is non-null the
// frozen weights' gradients are accumulated into it as well.
template <typename T>
PeftParams<T> backbone_backward(const BackboneParams<T>& params, const PeftParamSet<T>* attachment,
                                const BackboneCache<T>& cache, const BasicTensor<T>& grad_pooled,
                                BackboneParams<T>* backbone_grads = nullptr);

struct PretrainOptions {
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  // One content token per mixture class: the backbone learns token identity
  // for ids in [filler_end, vocab_size) and treats the rest as filler.
  std::size_t mixture_classes = 100;
  std::size_t tokens_per_class = 1;
  // 0 means every id can be indicative and filler is drawn from the whole
  // vocabulary.
  std::size_t filler_end = 100;
};

// Trains the full backbone plus a throwaway head on a seeded generic
// classification mixture, discards the head and freezes.
Backbone pretrain_backbone(const BackboneConfig& config, std::uint64_t corpus_seed, std::size_t steps,
                           const PretrainOptions& options = {});

}  // namespace tvcl
