#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvcl/backbone_config.hpp"
#include "tvcl/tensor.hpp"

namespace tvcl {

enum class PeftKind { lora, adapter };

std::string to_string(PeftKind kind);
PeftKind peft_kind_from_string(const std::string& s);

struct PeftConfig {
  PeftKind kind = PeftKind::adapter;
  // Width of the backbone the module attaches to; fixes every tensor shape.
  std::size_t d_model = 32;
  std::size_t lora_rank = 16;
  double lora_alpha = 32.0;
  std::size_t adapter_bottleneck = 32;
  // Ascending, unique layer indices.
  std::vector<std::size_t> target_layers{0, 1};
  std::size_t head_classes = 20;

  // Defaults sized for `backbone`: every layer targeted, head over the
  // union label space, alpha = 2·rank.
  static PeftConfig for_backbone(PeftKind kind, const BackboneConfig& backbone);

  void validate() const;
  void validate_against(const BackboneConfig& backbone) const;

  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }

  // Position of `layer` within target_layers, if targeted.
  std::optional<std::size_t> block_index(std::size_t layer) const;

  std::size_t parameter_count() const;

  friend bool operator==(const PeftConfig&, const PeftConfig&) = default;
};

template <typename T>
struct LoraWeights {
  BasicTensor<T> a_q;  // d_model × r
  BasicTensor<T> b_q;  // r × d_model
  BasicTensor<T> a_v;
  BasicTensor<T> b_v;

  friend bool operator==(const LoraWeights&, const LoraWeights&) = default;
};

template <typename T>
struct AdapterWeights {
  BasicTensor<T> w_down;  // d_model × b
  BasicTensor<T> b_down;  // b
  BasicTensor<T> w_up;    // b × d_model
  BasicTensor<T> b_up;    // d_model

  friend bool operator==(const AdapterWeights&, const AdapterWeights&) = default;
};

// The tensors of one PEFT module. Exactly one of `lora` / `adapter` is
// populated (one entry per targeted layer); the head is always present.
template <typename T>
struct PeftParams {
  std::vector<LoraWeights<T>> lora;
  std::vector<AdapterWeights<T>> adapter;
  BasicTensor<T> head_w;  // d_model × head_classes
  BasicTensor<T> head_b;  // head_classes

  static PeftParams zeros(const PeftConfig& config);

  // Visits tensors in canonical order: blocks by ascending layer, then the
  // head. f(name, tensor).
  template <typename F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  template <typename U>
  PeftParams<U> cast() const;

  friend bool operator==(const PeftParams&, const PeftParams&) = default;

 private:
  template <typename Self, typename F>
  static void for_each_impl(Self& self, F& f) {
    for (std::size_t i = 0; i < self.lora.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      f(p + "a_q", self.lora[i].a_q);
      f(p + "b_q", self.lora[i].b_q);
      f(p + "a_v", self.lora[i].a_v);
      f(p + "b_v", self.lora[i].b_v);
    }
    for (std::size_t i = 0; i < self.adapter.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      f(p + "w_down", self.adapter[i].w_down);
      f(p + "b_down", self.adapter[i].b_down);
      f(p + "w_up", self.adapter[i].w_up);
      f(p + "b_up", self.adapter[i].b_up);
    }
    f(std::string("head_w"), self.head_w);
    f(std::string("head_b"), self.head_b);
  }
};

struct Lineage {
  enum class Kind { random, pre, mean };
  Kind kind = Kind::random;
  // Meaningful for Kind::random only.
  std::uint64_t seed = 0;

  friend bool operator==(const Lineage&, const Lineage&) = default;
};

std::string to_string(Lineage::Kind kind);
Lineage::Kind lineage_kind_from_string(const std::string& s);

// Φ: live (trainable) parameters plus the snapshot taken at initialization.
template <typename T>
struct PeftParamSet {
  PeftConfig config;
  PeftParams<T> live;
  std::optional<PeftParams<T>> init_snapshot;
  Lineage lineage;

  template <typename U>
  PeftParamSet<U> cast() const;
};

using PeftModule = PeftParamSet<float>;

// x·w + (alpha/r)·(x·a)·b
template <typename T>
BasicTensor<T> lora_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_frozen, const BasicTensor<T>& a,
                            const BasicTensor<T>& b, double alpha, std::size_t r);

// h + relu(h·W_down + b_down)·W_up + b_up
template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& h, const AdapterWeights<T>& w);

// A, W_down and the head weights ~ Normal(0, 0.02); B, W_up and biases 0.
template <typename T>
PeftParamSet<T> init_random(const PeftConfig& config, std::uint64_t seed);

template <typename T>
PeftParamSet<T> init_pre(const PeftParamSet<T>& previous);

template <typename T>
PeftParamSet<T> init_mean(std::span<const PeftParamSet<T>> previous);

template <typename T>
std::vector<T> flatten(const PeftParams<T>& params);

template <typename T>
std::vector<T> flatten(const PeftParamSet<T>& phi) {
  return flatten(phi.live);
}

template <typename T>
PeftParams<T> unflatten(std::span<const T> flat, const PeftConfig& config);

void require_same_config(const PeftConfig& a, const PeftConfig& b, const char* op);

}  // namespace tvcl
