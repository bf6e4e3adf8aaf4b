#include "tvcl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tvcl/optimizer.hpp"
#include "tvcl/random.hpp"
#include "tvcl/synthetic.hpp"

namespace tvcl {

void BackboneConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || n_layers == 0 || max_seq_len == 0 ||
      n_total_classes == 0) {
    throw PreconditionError("backbone config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw PreconditionError("backbone config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                            std::to_string(n_heads));
  }
}

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, SplitMix64& rng) {
  BasicTensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, kInitStd));
  return t;
}

template <typename T>
BasicTensor<T> constant_tensor(Shape shape, T value) {
  BasicTensor<T> t(std::move(shape));
  t.fill(value);
  return t;
}

template <typename T>
EncoderLayerParams<T> make_layer(const BackboneConfig& c, SplitMix64* rng) {
  const std::size_t d = c.d_model, f = c.d_ff;
  auto weight = [&](Shape s) { return rng ? normal_tensor<T>(std::move(s), *rng) : BasicTensor<T>(std::move(s)); };
  const T gain = rng ? T(1) : T(0);
  EncoderLayerParams<T> l;
  l.w_q = weight({d, d});
  l.b_q = BasicTensor<T>({d});
  l.w_k = weight({d, d});
  l.b_k = BasicTensor<T>({d});
  l.w_v = weight({d, d});
  l.b_v = BasicTensor<T>({d});
  l.w_o = weight({d, d});
  l.b_o = BasicTensor<T>({d});
  l.ln1_gain = constant_tensor<T>({d}, gain);
  l.ln1_shift = BasicTensor<T>({d});
  l.w_1 = weight({d, f});
  l.b_1 = BasicTensor<T>({f});
  l.w_2 = weight({f, d});
  l.b_2 = BasicTensor<T>({d});
  l.ln2_gain = constant_tensor<T>({d}, gain);
  l.ln2_shift = BasicTensor<T>({d});
  return l;
}

template <typename T>
BackboneParams<T> make_backbone(const BackboneConfig& config, SplitMix64* rng) {
  config.validate();
  BackboneParams<T> p;
  p.config = config;
  const Shape tok{config.vocab_size, config.d_model}, pos{config.max_seq_len, config.d_model};
  p.token_embedding = rng ? normal_tensor<T>(tok, *rng) : BasicTensor<T>(tok);
  p.position_embedding = rng ? normal_tensor<T>(pos, *rng) : BasicTensor<T>(pos);
  for (std::size_t l = 0; l < config.n_layers; ++l) p.layers.push_back(make_layer<T>(config, rng));
  return p;
}

}  // namespace

template <typename T>
BackboneParams<T> BackboneParams<T>::random(const BackboneConfig& config, std::uint64_t seed) {
  SplitMix64 rng(stream_key({seed, 0xbacbULL}));
  BackboneParams<T> p = make_backbone<T>(config, &rng);
  p.freeze();
  return p;
}

template <typename T>
BackboneParams<T> BackboneParams<T>::zeros(const BackboneConfig& config) {
  return make_backbone<T>(config, nullptr);
}

template <typename T>
std::uint64_t BackboneParams<T>::compute_fingerprint() const {
  // FNV-1a over the raw bytes in canonical tensor order.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for_each([&](const std::string&, const BasicTensor<T>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  });
  return h;
}

template <typename T>
template <typename U>
BackboneParams<U> BackboneParams<T>::cast() const {
  BackboneParams<U> out = BackboneParams<U>::zeros(config);
  std::vector<const BasicTensor<T>*> src;
  for_each([&](const std::string&, const BasicTensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, BasicTensor<U>& t) { t = src[i++]->template cast<U>(); });
  out.freeze();
  return out;
}

namespace {

template <typename T>
void validate_tokens(std::span<const TokenSequence> tokens, const BackboneConfig& c) {
  if (tokens.empty()) throw PreconditionError("backbone_forward: empty batch");
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    const auto& seq = tokens[s];
    if (seq.empty()) throw LengthError("backbone_forward: sequence " + std::to_string(s) + " is empty");
    if (seq.size() > c.max_seq_len) {
      throw LengthError("backbone_forward: sequence " + std::to_string(s) + " has length " +
                        std::to_string(seq.size()) + " > max_seq_len " + std::to_string(c.max_seq_len));
    }
    for (std::int32_t id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
        throw VocabularyError("backbone_forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(c.vocab_size));
      }
    }
  }
}

// q/v projection with an optional LoRA delta; records x·A for backward.
template <typename T>
BasicTensor<T> project(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                       const BasicTensor<T>* a, const BasicTensor<T>* b, T scale, BasicTensor<T>* xa_out) {
  BasicTensor<T> y = ops::linear_forward(x, w, bias);
  if (a) {
    *xa_out = ops::matmul(x, *a);
    ops::add_scaled_inplace(y, ops::matmul(*xa_out, *b), scale);
  }
  return y;
}

}  // namespace

template <typename T>
BackboneOutput<T> backbone_forward(std::span<const TokenSequence> tokens, const BackboneParams<T>& params,
                                   const PeftParamSet<T>* attachment) {
  const BackboneConfig& c = params.config;
  validate_tokens<T>(tokens, c);
  if (attachment) attachment->config.validate_against(c);

  BackboneOutput<T> out;
  BackboneCache<T>& cache = out.cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.offsets.assign(1, 0);
  for (const auto& seq : tokens) cache.offsets.push_back(cache.offsets.back() + seq.size());
  const std::size_t n_rows = cache.offsets.back(), d = c.d_model;

  BasicTensor<T> x({n_rows, d});
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    for (std::size_t p = 0; p < tokens[s].size(); ++p) {
      auto row = x.row(cache.offsets[s] + p);
      auto te = params.token_embedding.row(static_cast<std::size_t>(tokens[s][p]));
      auto pe = params.position_embedding.row(p);
      for (std::size_t j = 0; j < d; ++j) row[j] = te[j] + pe[j];
    }
  }

  const T lora_scale = attachment ? static_cast<T>(attachment->config.lora_scale()) : T(0);
  const T eps = static_cast<T>(kLayerNormEps);
  cache.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const EncoderLayerParams<T>& w = params.layers[l];
    LayerCache<T>& lc = cache.layers[l];
    const auto block = attachment ? attachment->config.block_index(l) : std::nullopt;
    const LoraWeights<T>* lora = (block && !attachment->live.lora.empty()) ? &attachment->live.lora[*block] : nullptr;
    const AdapterWeights<T>* adapter =
        (block && !attachment->live.adapter.empty()) ? &attachment->live.adapter[*block] : nullptr;

    lc.q = project(x, w.w_q, w.b_q, lora ? &lora->a_q : nullptr, lora ? &lora->b_q : nullptr, lora_scale, &lc.xa_q);
    lc.k = ops::linear_forward(x, w.w_k, w.b_k);
    lc.v = project(x, w.w_v, w.b_v, lora ? &lora->a_v : nullptr, lora ? &lora->b_v : nullptr, lora_scale, &lc.xa_v);
    auto attn = ops::attention_forward(lc.q, lc.k, lc.v, std::span<const std::size_t>(cache.offsets), c.n_heads);
    lc.attention = std::move(attn.cache);
    lc.attn_concat = std::move(attn.out);

    BasicTensor<T> r1 = ops::linear_forward(lc.attn_concat, w.w_o, w.b_o);
    ops::add_inplace(r1, x);
    auto ln1 = ops::layer_norm_forward(r1, w.ln1_gain, w.ln1_shift, eps);
    lc.ln1 = std::move(ln1.cache);
    lc.h1 = std::move(ln1.y);

    lc.ff_pre = ops::linear_forward(lc.h1, w.w_1, w.b_1);
    lc.ff_act = ops::gelu_forward(lc.ff_pre);
    lc.ff_out = ops::linear_forward(lc.ff_act, w.w_2, w.b_2);

    BasicTensor<T> r2 = lc.ff_out;
    if (adapter) {
      lc.adapter_pre = ops::linear_forward(lc.ff_out, adapter->w_down, adapter->b_down);
      lc.adapter_act = ops::relu_forward(lc.adapter_pre);
      BasicTensor<T> up = ops::matmul(lc.adapter_act, adapter->w_up);
      ops::add_row_broadcast(up, adapter->b_up);
      ops::add_inplace(r2, up);
    }
    ops::add_inplace(r2, lc.h1);
    auto ln2 = ops::layer_norm_forward(r2, w.ln2_gain, w.ln2_shift, eps);
    lc.ln2 = std::move(ln2.cache);
    lc.x_in = std::move(x);
    x = std::move(ln2.y);
  }

  out.pooled = BasicTensor<T>({tokens.size(), d});
  for (std::size_t s = 0; s < tokens.size(); ++s) {
    auto pr = out.pooled.row(s);
    for (std::size_t i = cache.offsets[s]; i < cache.offsets[s + 1]; ++i) {
      auto xr = x.row(i);
      for (std::size_t j = 0; j < d; ++j) pr[j] += xr[j];
    }
    const T inv = T(1) / static_cast<T>(tokens[s].size());
    for (std::size_t j = 0; j < d; ++j) pr[j] *= inv;
  }
  ops::ensure_finite(out.pooled, "backbone_forward");
  return out;
}

template <typename T>
PeftParams<T> backbone_backward(const BackboneParams<T>& params, const PeftParamSet<T>* attachment,
                                const BackboneCache<T>& cache, const BasicTensor<T>& grad_pooled,
                                BackboneParams<T>* backbone_grads) {
  const BackboneConfig& c = params.config;
  const std::size_t d = c.d_model, n_seq = cache.tokens.size();
  if (grad_pooled.rank() != 2 || grad_pooled.rows() != n_seq || grad_pooled.cols() != d) {
    throw DimensionError("backbone_backward: grad_pooled shape " + shape_to_string(grad_pooled.shape()));
  }
  PeftParams<T> peft_grads;
  if (attachment) peft_grads = PeftParams<T>::zeros(attachment->config);
  if (!attachment && !backbone_grads) return peft_grads;

  // Nothing below the lowest attached layer needs a gradient unless the
  // frozen weights are being trained too.
  std::size_t lowest = 0;
  if (!backbone_grads) {
    if (attachment->config.target_layers.empty()) return peft_grads;
    lowest = attachment->config.target_layers.front();
  }

  const std::span<const std::size_t> offsets(cache.offsets);
  BasicTensor<T> dx({cache.offsets.back(), d});
  for (std::size_t s = 0; s < n_seq; ++s) {
    const T inv = T(1) / static_cast<T>(cache.tokens[s].size());
    auto gp = grad_pooled.row(s);
    for (std::size_t i = cache.offsets[s]; i < cache.offsets[s + 1]; ++i) {
      auto r = dx.row(i);
      for (std::size_t j = 0; j < d; ++j) r[j] = gp[j] * inv;
    }
  }

  const T lora_scale = attachment ? static_cast<T>(attachment->config.lora_scale()) : T(0);
  for (std::size_t li = c.n_layers; li-- > lowest;) {
    const EncoderLayerParams<T>& w = params.layers[li];
    const LayerCache<T>& lc = cache.layers[li];
    EncoderLayerParams<T>* gw = backbone_grads ? &backbone_grads->layers[li] : nullptr;
    const auto block = attachment ? attachment->config.block_index(li) : std::nullopt;
    const LoraWeights<T>* lora = (block && !attachment->live.lora.empty()) ? &attachment->live.lora[*block] : nullptr;
    const AdapterWeights<T>* adapter =
        (block && !attachment->live.adapter.empty()) ? &attachment->live.adapter[*block] : nullptr;
    const bool need_input_grad = gw || li > lowest;

    auto ln2 = ops::layer_norm_backward(lc.ln2, dx);
    if (gw) {
      ops::add_inplace(gw->ln2_gain, ln2.grad_gain);
      ops::add_inplace(gw->ln2_shift, ln2.grad_shift);
    }
    const BasicTensor<T>& d_r2 = ln2.grad_x;

    BasicTensor<T> d_ff_out = d_r2;
    if (adapter) {
      AdapterWeights<T>& ga = peft_grads.adapter[*block];
      ga.w_up = ops::matmul_tn(lc.adapter_act, d_r2);
      ga.b_up = ops::column_sum(d_r2);
      BasicTensor<T> d_pre = ops::relu_backward(lc.adapter_pre, ops::matmul_nt(d_r2, adapter->w_up));
      ga.w_down = ops::matmul_tn(lc.ff_out, d_pre);
      ga.b_down = ops::column_sum(d_pre);
      ops::add_inplace(d_ff_out, ops::matmul_nt(d_pre, adapter->w_down));
    }
    if (!need_input_grad && !lora) break;

    BasicTensor<T> d_h1 = d_r2;
    BasicTensor<T> d_act = ops::matmul_nt(d_ff_out, w.w_2);
    BasicTensor<T> d_ff_pre = ops::gelu_backward(lc.ff_pre, d_act);
    ops::add_inplace(d_h1, ops::matmul_nt(d_ff_pre, w.w_1));
    if (gw) {
      ops::add_inplace(gw->w_2, ops::matmul_tn(lc.ff_act, d_ff_out));
      ops::add_inplace(gw->b_2, ops::column_sum(d_ff_out));
      ops::add_inplace(gw->w_1, ops::matmul_tn(lc.h1, d_ff_pre));
      ops::add_inplace(gw->b_1, ops::column_sum(d_ff_pre));
    }

    auto ln1 = ops::layer_norm_backward(lc.ln1, d_h1);
    if (gw) {
      ops::add_inplace(gw->ln1_gain, ln1.grad_gain);
      ops::add_inplace(gw->ln1_shift, ln1.grad_shift);
    }
    const BasicTensor<T>& d_r1 = ln1.grad_x;

    BasicTensor<T> d_concat = ops::matmul_nt(d_r1, w.w_o);
    if (gw) {
      ops::add_inplace(gw->w_o, ops::matmul_tn(lc.attn_concat, d_r1));
      ops::add_inplace(gw->b_o, ops::column_sum(d_r1));
    }
    auto da = ops::attention_backward(lc.q, lc.k, lc.v, lc.attention, d_concat, offsets, c.n_heads);

    if (lora) {
      LoraWeights<T>& gl = peft_grads.lora[*block];
      gl.b_q = ops::matmul_tn(lc.xa_q, da.grad_q);
      for (T& v : gl.b_q.data()) v *= lora_scale;
      BasicTensor<T> d_xa_q = ops::matmul_nt(da.grad_q, lora->b_q);
      for (T& v : d_xa_q.data()) v *= lora_scale;
      gl.a_q = ops::matmul_tn(lc.x_in, d_xa_q);

      gl.b_v = ops::matmul_tn(lc.xa_v, da.grad_v);
      for (T& v : gl.b_v.data()) v *= lora_scale;
      BasicTensor<T> d_xa_v = ops::matmul_nt(da.grad_v, lora->b_v);
      for (T& v : d_xa_v.data()) v *= lora_scale;
      gl.a_v = ops::matmul_tn(lc.x_in, d_xa_v);

      if (need_input_grad) {
        BasicTensor<T> d_x = d_r1;
        ops::add_inplace(d_x, ops::matmul_nt(d_xa_q, lora->a_q));
        ops::add_inplace(d_x, ops::matmul_nt(d_xa_v, lora->a_v));
        ops::add_inplace(d_x, ops::matmul_nt(da.grad_q, w.w_q));
        ops::add_inplace(d_x, ops::matmul_nt(da.grad_k, w.w_k));
        ops::add_inplace(d_x, ops::matmul_nt(da.grad_v, w.w_v));
        dx = std::move(d_x);
      }
    } else if (need_input_grad) {
      BasicTensor<T> d_x = d_r1;
      ops::add_inplace(d_x, ops::matmul_nt(da.grad_q, w.w_q));
      ops::add_inplace(d_x, ops::matmul_nt(da.grad_k, w.w_k));
      ops::add_inplace(d_x, ops::matmul_nt(da.grad_v, w.w_v));
      dx = std::move(d_x);
    }
    if (gw) {
      ops::add_inplace(gw->w_q, ops::matmul_tn(lc.x_in, da.grad_q));
      ops::add_inplace(gw->b_q, ops::column_sum(da.grad_q));
      ops::add_inplace(gw->w_k, ops::matmul_tn(lc.x_in, da.grad_k));
      ops::add_inplace(gw->b_k, ops::column_sum(da.grad_k));
      ops::add_inplace(gw->w_v, ops::matmul_tn(lc.x_in, da.grad_v));
      ops::add_inplace(gw->b_v, ops::column_sum(da.grad_v));
    }
    if (!need_input_grad) break;
  }

  if (backbone_grads) {
    for (std::size_t s = 0; s < n_seq; ++s) {
      for (std::size_t p = 0; p < cache.tokens[s].size(); ++p) {
        auto g = dx.row(cache.offsets[s] + p);
        auto te = backbone_grads->token_embedding.row(static_cast<std::size_t>(cache.tokens[s][p]));
        auto pe = backbone_grads->position_embedding.row(p);
        for (std::size_t j = 0; j < d; ++j) {
          te[j] += g[j];
          pe[j] += g[j];
        }
      }
    }
  }
  return peft_grads;
}

namespace {

std::vector<float> flatten_backbone(const Backbone& b) {
  std::vector<float> flat;
  b.for_each([&](const std::string&, const Tensor& t) { flat.insert(flat.end(), t.data().begin(), t.data().end()); });
  return flat;
}

void unflatten_backbone(Backbone& b, const std::vector<float>& flat) {
  std::size_t pos = 0;
  b.for_each([&](const std::string&, Tensor& t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.data().begin());
    pos += t.size();
  });
}

}  // namespace

Backbone pretrain_backbone(const BackboneConfig& config, std::uint64_t corpus_seed, std::size_t steps,
                           const PretrainOptions& options) {
  if (steps == 0) throw PreconditionError("pretrain_backbone: steps must be at least 1");
  config.validate();
  MixtureSpec mix;
  mix.vocab_size = config.vocab_size;
  mix.n_classes = options.mixture_classes;
  mix.tokens_per_class = options.tokens_per_class;
  mix.filler_end = options.filler_end;
  mix.max_length = std::min(mix.max_length, config.max_seq_len);
  mix.min_length = std::min(mix.min_length, mix.max_length);

  Backbone backbone = Backbone::random(config, stream_key({corpus_seed, 1}));
  SplitMix64 head_rng(stream_key({corpus_seed, 2}));
  Tensor head_w = normal_tensor<float>({config.d_model, mix.n_classes}, head_rng);
  Tensor head_b({mix.n_classes});

  std::vector<float> flat = flatten_backbone(backbone);
  const std::size_t n_backbone = flat.size();
  flat.insert(flat.end(), head_w.data().begin(), head_w.data().end());
  flat.insert(flat.end(), head_b.data().begin(), head_b.data().end());
  Adam adam(flat.size(), AdamOptions{options.learning_rate});
  const ops::ClassMask all(mix.n_classes, true);

  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = generate_mixture(mix, stream_key({corpus_seed, 3}), step * options.batch_size,
                                        options.batch_size);
    std::vector<TokenSequence> tokens;
    std::vector<std::int32_t> labels;
    for (const auto& ex : batch) {
      tokens.push_back(ex.tokens);
      labels.push_back(ex.label);
    }
    auto fwd = backbone_forward<float>(tokens, backbone);
    Tensor logits = ops::linear_forward(fwd.pooled, head_w, head_b);
    auto ce = ops::softmax_cross_entropy(logits, labels, all);
    if (!std::isfinite(ce.loss)) throw DivergenceError("pretrain_backbone: non-finite loss", step);
    auto head = ops::linear_backward(fwd.pooled, head_w, ce.grad_logits);

    Backbone grads = Backbone::zeros(config);
    backbone_backward<float>(backbone, nullptr, fwd.cache, head.grad_x, &grads);
    std::vector<float> g = flatten_backbone(grads);
    g.insert(g.end(), head.grad_w.data().begin(), head.grad_w.data().end());
    g.insert(g.end(), head.grad_bias.data().begin(), head.grad_bias.data().end());
    adam.step(std::span<float>(flat), std::span<const float>(g));

    unflatten_backbone(backbone, flat);
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(n_backbone), head_w.size(), head_w.data().begin());
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(n_backbone + head_w.size()), head_b.size(),
                head_b.data().begin());
  }
  backbone.freeze();
  return backbone;
}

#define TVCL_INSTANTIATE_BACKBONE(T)                                                                          \
  template struct BackboneParams<T>;                                                                          \
  template BackboneOutput<T> backbone_forward(std::span<const TokenSequence>, const BackboneParams<T>&,       \
                                              const PeftParamSet<T>*);                                        \
  template PeftParams<T> backbone_backward(const BackboneParams<T>&, const PeftParamSet<T>*,                  \
                                           const BackboneCache<T>&, const BasicTensor<T>&, BackboneParams<T>*);

TVCL_INSTANTIATE_BACKBONE(float)
TVCL_INSTANTIATE_BACKBONE(double)

template BackboneParams<double> BackboneParams<float>::cast<double>() const;
template BackboneParams<float> BackboneParams<double>::cast<float>() const;

#undef TVCL_INSTANTIATE_BACKBONE

}  // namespace tvcl
