#include "tvcl/peft.hpp"

#include <algorithm>

#include "tvcl/ops.hpp"
#include "tvcl/random.hpp"

namespace tvcl {

std::string to_string(PeftKind kind) { return kind == PeftKind::lora ? "lora" : "adapter"; }

PeftKind peft_kind_from_string(const std::string& s) {
  if (s == "lora") return PeftKind::lora;
  if (s == "adapter") return PeftKind::adapter;
  throw PreconditionError("unknown PEFT kind '" + s + "'");
}

std::string to_string(Lineage::Kind kind) {
  switch (kind) {
    case Lineage::Kind::random: return "random";
    case Lineage::Kind::pre: return "pre";
    case Lineage::Kind::mean: return "mean";
  }
  return "random";
}

Lineage::Kind lineage_kind_from_string(const std::string& s) {
  if (s == "random") return Lineage::Kind::random;
  if (s == "pre") return Lineage::Kind::pre;
  if (s == "mean") return Lineage::Kind::mean;
  throw PreconditionError("unknown lineage '" + s + "'");
}

PeftConfig PeftConfig::for_backbone(PeftKind kind, const BackboneConfig& backbone) {
  PeftConfig c;
  c.kind = kind;
  c.d_model = backbone.d_model;
  c.target_layers.clear();
  for (std::size_t l = 0; l < backbone.n_layers; ++l) c.target_layers.push_back(l);
  c.head_classes = backbone.n_total_classes;
  c.lora_alpha = 2.0 * static_cast<double>(c.lora_rank);
  return c;
}

void PeftConfig::validate() const {
  if (d_model == 0 || head_classes == 0) throw PreconditionError("PEFT config: d_model and head_classes must be positive");
  if (kind == PeftKind::lora) {
    if (lora_rank == 0 || lora_rank > d_model) {
      throw PreconditionError("PEFT config: lora rank " + std::to_string(lora_rank) + " must lie in [1, d_model]");
    }
    if (!(lora_alpha > 0.0)) throw PreconditionError("PEFT config: lora alpha must be positive");
  } else {
    if (adapter_bottleneck == 0 || adapter_bottleneck > 4 * d_model) {
      throw PreconditionError("PEFT config: adapter bottleneck " + std::to_string(adapter_bottleneck) +
                              " must lie in [1, 4·d_model]");
    }
  }
  for (std::size_t i = 1; i < target_layers.size(); ++i) {
    if (target_layers[i] <= target_layers[i - 1]) {
      throw PreconditionError("PEFT config: target layers must be strictly ascending");
    }
  }
}

void PeftConfig::validate_against(const BackboneConfig& backbone) const {
  validate();
  if (d_model != backbone.d_model) throw IncompatibleModuleError("PEFT module width does not match backbone d_model");
  if (!target_layers.empty() && target_layers.back() >= backbone.n_layers) {
    throw IncompatibleModuleError("PEFT module targets layer " + std::to_string(target_layers.back()) +
                                  " but backbone has " + std::to_string(backbone.n_layers));
  }
}

std::optional<std::size_t> PeftConfig::block_index(std::size_t layer) const {
  auto it = std::lower_bound(target_layers.begin(), target_layers.end(), layer);
  if (it == target_layers.end() || *it != layer) return std::nullopt;
  return static_cast<std::size_t>(it - target_layers.begin());
}

std::size_t PeftConfig::parameter_count() const {
  const std::size_t per_block = kind == PeftKind::lora
                                    ? 4 * d_model * lora_rank
                                    : 2 * d_model * adapter_bottleneck + adapter_bottleneck + d_model;
  return target_layers.size() * per_block + d_model * head_classes + head_classes;
}

void require_same_config(const PeftConfig& a, const PeftConfig& b, const char* op) {
  if (!(a == b)) throw IncompatibleModuleError(std::string(op) + ": PEFT configs differ");
}

template <typename T>
PeftParams<T> PeftParams<T>::zeros(const PeftConfig& config) {
  config.validate();
  PeftParams<T> p;
  const std::size_t d = config.d_model;
  for (std::size_t i = 0; i < config.target_layers.size(); ++i) {
    if (config.kind == PeftKind::lora) {
      const std::size_t r = config.lora_rank;
      p.lora.push_back({BasicTensor<T>({d, r}), BasicTensor<T>({r, d}), BasicTensor<T>({d, r}), BasicTensor<T>({r, d})});
    } else {
      const std::size_t b = config.adapter_bottleneck;
      p.adapter.push_back({BasicTensor<T>({d, b}), BasicTensor<T>({b}), BasicTensor<T>({b, d}), BasicTensor<T>({d})});
    }
  }
  p.head_w = BasicTensor<T>({d, config.head_classes});
  p.head_b = BasicTensor<T>({config.head_classes});
  return p;
}

template <typename T>
template <typename U>
PeftParams<U> PeftParams<T>::cast() const {
  PeftParams<U> out;
  for (const auto& l : lora) out.lora.push_back({l.a_q.template cast<U>(), l.b_q.template cast<U>(),
                                                 l.a_v.template cast<U>(), l.b_v.template cast<U>()});
  for (const auto& a : adapter) out.adapter.push_back({a.w_down.template cast<U>(), a.b_down.template cast<U>(),
                                                       a.w_up.template cast<U>(), a.b_up.template cast<U>()});
  out.head_w = head_w.template cast<U>();
  out.head_b = head_b.template cast<U>();
  return out;
}

template <typename T>
template <typename U>
PeftParamSet<U> PeftParamSet<T>::cast() const {
  PeftParamSet<U> out{config, live.template cast<U>(), std::nullopt, lineage};
  if (init_snapshot) out.init_snapshot = init_snapshot->template cast<U>();
  return out;
}

template <typename T>
BasicTensor<T> lora_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_frozen, const BasicTensor<T>& a,
                            const BasicTensor<T>& b, double alpha, std::size_t r) {
  if (r == 0 || a.rank() != 2 || b.rank() != 2 || a.cols() != r || b.rows() != r || a.rows() != w_frozen.rows() ||
      b.cols() != w_frozen.cols()) {
    throw DimensionError("lora_forward: factors " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " do not fit weight " + shape_to_string(w_frozen.shape()) +
                         " at rank " + std::to_string(r));
  }
  BasicTensor<T> y = ops::matmul(x, w_frozen);
  const BasicTensor<T> delta = ops::matmul(ops::matmul(x, a), b);
  ops::add_scaled_inplace(y, delta, static_cast<T>(alpha / static_cast<double>(r)));
  return y;
}

template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& h, const AdapterWeights<T>& w) {
  BasicTensor<T> up = ops::matmul(ops::relu_forward(ops::linear_forward(h, w.w_down, w.b_down)), w.w_up);
  ops::add_row_broadcast(up, w.b_up);
  BasicTensor<T> out = h;
  ops::add_inplace(out, up);
  return out;
}

namespace {

constexpr double kInitStd = 0.02;

template <typename T>
void fill_normal(BasicTensor<T>& t, SplitMix64& rng) {
  for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, kInitStd));
}

}  // namespace

template <typename T>
PeftParamSet<T> init_random(const PeftConfig& config, std::uint64_t seed) {
  PeftParamSet<T> phi{config, PeftParams<T>::zeros(config), std::nullopt, {Lineage::Kind::random, seed}};
  SplitMix64 rng(stream_key({seed, 0x9ef7ULL}));
  for (auto& l : phi.live.lora) {
    fill_normal(l.a_q, rng);
    fill_normal(l.a_v, rng);
  }
  for (auto& a : phi.live.adapter) fill_normal(a.w_down, rng);
  fill_normal(phi.live.head_w, rng);
  phi.init_snapshot = phi.live;
  return phi;
}

template <typename T>
PeftParamSet<T> init_pre(const PeftParamSet<T>& previous) {
  PeftParamSet<T> phi{previous.config, previous.live, previous.live, {Lineage::Kind::pre, 0}};
  return phi;
}

template <typename T>
PeftParamSet<T> init_mean(std::span<const PeftParamSet<T>> previous) {
  if (previous.empty()) throw PreconditionError("init_mean: no previous modules");
  const PeftConfig& config = previous.front().config;
  for (const auto& p : previous) require_same_config(config, p.config, "init_mean");

  const std::size_t n = config.parameter_count();
  std::vector<double> acc(n, 0.0);
  for (const auto& p : previous) {
    const std::vector<T> flat = flatten(p.live);
    for (std::size_t i = 0; i < n; ++i) acc[i] += static_cast<double>(flat[i]);
  }
  std::vector<T> mean(n);
  const double count = static_cast<double>(previous.size());
  for (std::size_t i = 0; i < n; ++i) mean[i] = static_cast<T>(acc[i] / count);

  PeftParams<T> live = unflatten(std::span<const T>(mean), config);
  return PeftParamSet<T>{config, live, live, {Lineage::Kind::mean, 0}};
}

template <typename T>
std::vector<T> flatten(const PeftParams<T>& params) {
  std::vector<T> flat;
  params.for_each([&](const std::string&, const BasicTensor<T>& t) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  });
  return flat;
}

template <typename T>
PeftParams<T> unflatten(std::span<const T> flat, const PeftConfig& config) {
  if (flat.size() != config.parameter_count()) {
    throw DimensionError("unflatten: got " + std::to_string(flat.size()) + " values, config needs " +
                         std::to_string(config.parameter_count()));
  }
  PeftParams<T> p = PeftParams<T>::zeros(config);
  std::size_t pos = 0;
  p.for_each([&](const std::string&, BasicTensor<T>& t) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), t.size(), t.data().begin());
    pos += t.size();
  });
  return p;
}

#define TVCL_INSTANTIATE_PEFT(T)                                                                                 \
  template struct PeftParams<T>;                                                                                \
  template BasicTensor<T> lora_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                       const BasicTensor<T>&, double, std::size_t);                             \
  template BasicTensor<T> adapter_forward(const BasicTensor<T>&, const AdapterWeights<T>&);                     \
  template PeftParamSet<T> init_random(const PeftConfig&, std::uint64_t);                                       \
  template PeftParamSet<T> init_pre(const PeftParamSet<T>&);                                                    \
  template PeftParamSet<T> init_mean(std::span<const PeftParamSet<T>>);                                         \
  template std::vector<T> flatten(const PeftParams<T>&);                                                        \
  template PeftParams<T> unflatten(std::span<const T>, const PeftConfig&);

TVCL_INSTANTIATE_PEFT(float)
TVCL_INSTANTIATE_PEFT(double)

template PeftParams<double> PeftParams<float>::cast<double>() const;
template PeftParams<float> PeftParams<double>::cast<float>() const;
template PeftParams<float> PeftParams<float>::cast<float>() const;
template PeftParamSet<double> PeftParamSet<float>::cast<double>() const;
template PeftParamSet<float> PeftParamSet<double>::cast<float>() const;

#undef TVCL_INSTANTIATE_PEFT

}  // namespace tvcl
