#include "tvcl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tvcl::ops {

namespace {

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* op, const char* name) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + name + " must be a matrix, got " + shape_to_string(t.shape()));
  }
}

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
}

template <typename T>
void require_bias(const BasicTensor<T>& bias, std::size_t width, const char* op) {
  if (bias.rank() != 1 || bias.dim(0) != width) mismatch(op, bias.shape(), Shape{width});
}

}  // namespace

template <typename T>
void ensure_finite(const BasicTensor<T>& t, const char* what) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul", "a");
  require_rank2(b, "matmul", "b");
  if (a.cols() != b.rows()) mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_tn", "a");
  require_rank2(b, "matmul_tn", "b");
  if (a.rows() != b.rows()) mismatch("matmul_tn", a.shape(), b.shape());
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  BasicTensor<T> out({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t r = 0; r < k; ++r) {
    const T* brow = pb + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T ari = pa[r * m + i];
      T* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += ari * brow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  require_rank2(a, "transpose", "a");
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a, "matmul_nt", "a");
  require_rank2(b, "matmul_nt", "b");
  if (a.cols() != b.cols()) mismatch("matmul_nt", a.shape(), b.shape());
  return matmul(a, transpose(b));
}

template <typename T>
BasicTensor<T> column_sum(const BasicTensor<T>& a) {
  require_rank2(a, "column_sum", "a");
  BasicTensor<T> out({a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += r[j];
  }
  return out;
}

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  if (dst.shape() != src.shape()) mismatch("add", dst.shape(), src.shape());
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T>
void add_scaled_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src, T scale) {
  if (dst.shape() != src.shape()) mismatch("add_scaled", dst.shape(), src.shape());
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

template <typename T>
void add_row_broadcast(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  require_rank2(x, "add_row_broadcast", "x");
  require_bias(bias, x.cols(), "add_row_broadcast");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

template <typename T>
BasicTensor<T> linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  require_rank2(x, "linear_forward", "x");
  require_rank2(w, "linear_forward", "w");
  if (x.cols() != w.rows()) mismatch("linear_forward", x.shape(), w.shape());
  require_bias(bias, w.cols(), "linear_forward");
  BasicTensor<T> y = matmul(x, w);
  add_row_broadcast(y, bias);
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& grad_out) {
  require_rank2(x, "linear_backward", "x");
  require_rank2(w, "linear_backward", "w");
  require_rank2(grad_out, "linear_backward", "grad_out");
  if (x.cols() != w.rows()) mismatch("linear_backward", x.shape(), w.shape());
  if (grad_out.rows() != x.rows() || grad_out.cols() != w.cols()) {
    mismatch("linear_backward", grad_out.shape(), Shape{x.rows(), w.cols()});
  }
  return {matmul_nt(grad_out, w), matmul_tn(x, grad_out), column_sum(grad_out)};
}

template <typename T>
LayerNormResult<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                                      const BasicTensor<T>& shift, T eps) {
  require_rank2(x, "layer_norm_forward", "x");
  require_bias(gain, x.cols(), "layer_norm_forward");
  require_bias(shift, x.cols(), "layer_norm_forward");
  if (!(eps > T(0))) throw PreconditionError("layer_norm_forward: eps must be positive");
  const std::size_t n = x.rows(), d = x.cols();
  LayerNormResult<T> res{BasicTensor<T>(x.shape()), {BasicTensor<T>(x.shape()), std::vector<T>(n), gain}};
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    T mean = 0;
    for (T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T inv_std = T(1) / std::sqrt(var + eps);
    res.cache.inv_std[i] = inv_std;
    auto xh = res.cache.x_hat.row(i);
    auto yr = res.y.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mean) * inv_std;
      yr[j] = gain[j] * xh[j] + shift[j];
    }
  }
  return res;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNormCache<T>& cache, const BasicTensor<T>& grad_out) {
  if (grad_out.shape() != cache.x_hat.shape()) mismatch("layer_norm_backward", grad_out.shape(), cache.x_hat.shape());
  const std::size_t n = grad_out.rows(), d = grad_out.cols();
  LayerNormGrads<T> g{BasicTensor<T>(grad_out.shape()), BasicTensor<T>({d}), BasicTensor<T>({d})};
  std::vector<T> dxh(d);
  for (std::size_t i = 0; i < n; ++i) {
    auto gy = grad_out.row(i);
    auto xh = cache.x_hat.row(i);
    T mean_dxh = 0, mean_dxh_xh = 0;
    for (std::size_t j = 0; j < d; ++j) {
      g.grad_gain[j] += gy[j] * xh[j];
      g.grad_shift[j] += gy[j];
      dxh[j] = gy[j] * cache.gain[j];
      mean_dxh += dxh[j];
      mean_dxh_xh += dxh[j] * xh[j];
    }
    mean_dxh /= static_cast<T>(d);
    mean_dxh_xh /= static_cast<T>(d);
    auto gx = g.grad_x.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      gx[j] = cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
    }
  }
  return g;
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
}  // namespace

template <typename T>
BasicTensor<T> gelu_forward(const BasicTensor<T>& u) {
  BasicTensor<T> y(u.shape());
  const T c = static_cast<T>(kSqrt2OverPi), k = static_cast<T>(kGeluCubic);
  for (std::size_t i = 0; i < u.size(); ++i) {
    const T x = u[i];
    y[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  return y;
}

template <typename T>
BasicTensor<T> gelu_backward(const BasicTensor<T>& u, const BasicTensor<T>& grad_out) {
  if (u.shape() != grad_out.shape()) mismatch("gelu_backward", u.shape(), grad_out.shape());
  BasicTensor<T> g(u.shape());
  const T c = static_cast<T>(kSqrt2OverPi), k = static_cast<T>(kGeluCubic);
  for (std::size_t i = 0; i < u.size(); ++i) {
    const T x = u[i];
    const T t = std::tanh(c * (x + k * x * x * x));
    const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
    g[i] = grad_out[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
  }
  return g;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& u) {
  BasicTensor<T> y(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) y[i] = u[i] > T(0) ? u[i] : T(0);
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& u, const BasicTensor<T>& grad_out) {
  if (u.shape() != grad_out.shape()) mismatch("relu_backward", u.shape(), grad_out.shape());
  BasicTensor<T> g(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = u[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

namespace {

template <typename T>
void check_attention_inputs(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                            std::span<const std::size_t> offsets, std::size_t n_heads) {
  require_rank2(q, "attention", "q");
  if (k.shape() != q.shape()) mismatch("attention", q.shape(), k.shape());
  if (v.shape() != q.shape()) mismatch("attention", q.shape(), v.shape());
  if (n_heads == 0 || q.cols() % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q.cols()) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != q.rows()) {
    throw DimensionError("attention: offsets do not cover " + std::to_string(q.rows()) + " rows");
  }
}

}  // namespace

template <typename T>
AttentionResult<T> attention_forward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                     std::span<const std::size_t> offsets, std::size_t n_heads) {
  check_attention_inputs(q, k, v, offsets, n_heads);
  const std::size_t d = q.cols(), dh = d / n_heads, n_seq = offsets.size() - 1;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionResult<T> res{BasicTensor<T>(q.shape()), {}};
  res.cache.probs.resize(n_seq * n_heads);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t base = offsets[s], len = offsets[s + 1] - offsets[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      auto& p = res.cache.probs[s * n_heads + h];
      p.assign(len * len, T(0));
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = &q(base + i, c0);
        T* pi = p.data() + i * len;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const T* kj = &k(base + j, c0);
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
          pi[j] = dot * scale;
          mx = std::max(mx, pi[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < len; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        T* oi = &res.out(base + i, c0);
        for (std::size_t j = 0; j < len; ++j) {
          pi[j] /= z;
          const T* vj = &v(base + j, c0);
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }
  return res;
}

template <typename T>
AttentionGrads<T> attention_backward(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                     const AttentionCache<T>& cache, const BasicTensor<T>& grad_out,
                                     std::span<const std::size_t> offsets, std::size_t n_heads) {
  check_attention_inputs(q, k, v, offsets, n_heads);
  if (grad_out.shape() != q.shape()) mismatch("attention_backward", grad_out.shape(), q.shape());
  const std::size_t d = q.cols(), dh = d / n_heads, n_seq = offsets.size() - 1;
  if (cache.probs.size() != n_seq * n_heads) throw DimensionError("attention_backward: cache does not match batch");
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g{BasicTensor<T>(q.shape()), BasicTensor<T>(q.shape()), BasicTensor<T>(q.shape())};
  std::vector<T> dp;
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t base = offsets[s], len = offsets[s + 1] - offsets[s];
    dp.resize(len);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      const auto& p = cache.probs[s * n_heads + h];
      for (std::size_t i = 0; i < len; ++i) {
        const T* go = &grad_out(base + i, c0);
        const T* pi = p.data() + i * len;
        T weighted = 0;
        for (std::size_t j = 0; j < len; ++j) {
          const T* vj = &v(base + j, c0);
          T* gvj = &g.grad_v(base + j, c0);
          T dot = 0;
          for (std::size_t c = 0; c < dh; ++c) {
            dot += go[c] * vj[c];
            gvj[c] += pi[j] * go[c];
          }
          dp[j] = dot;
          weighted += pi[j] * dot;
        }
        const T* qi = &q(base + i, c0);
        T* gqi = &g.grad_q(base + i, c0);
        for (std::size_t j = 0; j < len; ++j) {
          const T ds = pi[j] * (dp[j] - weighted) * scale;
          const T* kj = &k(base + j, c0);
          T* gkj = &g.grad_k(base + j, c0);
          for (std::size_t c = 0; c < dh; ++c) {
            gqi[c] += ds * kj[c];
            gkj[c] += ds * qi[c];
          }
        }
      }
    }
  }
  return g;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                            std::span<const ClassMask> row_masks) {
  require_rank2(logits, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) mismatch("softmax_cross_entropy", logits.shape(), Shape{labels.size()});
  if (row_masks.size() != n) mismatch("softmax_cross_entropy", logits.shape(), Shape{row_masks.size()});
  CrossEntropyResult<T> res{0.0, BasicTensor<T>(logits.shape())};
  std::vector<double> prob(c);
  for (std::size_t i = 0; i < n; ++i) {
    const ClassMask& mask = row_masks[i];
    if (mask.size() != c) mismatch("softmax_cross_entropy", Shape{mask.size()}, Shape{c});
    const std::int32_t y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c || !mask[static_cast<std::size_t>(y)]) {
      throw InvalidLabelError("softmax_cross_entropy: label " + std::to_string(y) + " in row " + std::to_string(i) +
                              " is outside the unmasked classes");
    }
    auto z = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask[j]) mx = std::max(mx, static_cast<double>(z[j]));
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      prob[j] = mask[j] ? std::exp(static_cast<double>(z[j]) - mx) : 0.0;
      sum += prob[j];
    }
    const double lse = mx + std::log(sum);
    res.loss += lse - static_cast<double>(z[static_cast<std::size_t>(y)]);
    auto gr = res.grad_logits.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      const double pj = prob[j] / sum;
      const double target = (static_cast<std::int32_t>(j) == y) ? 1.0 : 0.0;
      gr[j] = mask[j] ? static_cast<T>((pj - target) / static_cast<double>(n)) : T(0);
    }
  }
  res.loss /= static_cast<double>(n);
  if (!std::isfinite(res.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
  return res;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels,
                                            const ClassMask& class_mask) {
  if (std::none_of(class_mask.begin(), class_mask.end(), [](bool b) { return b; })) {
    throw PreconditionError("softmax_cross_entropy: class mask has no active class");
  }
  std::vector<ClassMask> masks(labels.size(), class_mask);
  return softmax_cross_entropy(logits, labels, std::span<const ClassMask>(masks));
}

#define TVCL_INSTANTIATE_OPS(T)                                                                                   \
  template void ensure_finite(const BasicTensor<T>&, const char*);                                               \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> column_sum(const BasicTensor<T>&);                                                     \
  template void add_inplace(BasicTensor<T>&, const BasicTensor<T>&);                                             \
  template void add_scaled_inplace(BasicTensor<T>&, const BasicTensor<T>&, T);                                   \
  template void add_row_broadcast(BasicTensor<T>&, const BasicTensor<T>&);                                       \
  template BasicTensor<T> linear_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);   \
  template LinearGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);  \
  template LayerNormResult<T> layer_norm_forward(const BasicTensor<T>&, const BasicTensor<T>&,                   \
                                                 const BasicTensor<T>&, T);                                      \
  template LayerNormGrads<T> layer_norm_backward(const LayerNormCache<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> gelu_forward(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> gelu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template AttentionResult<T> attention_forward(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                                const BasicTensor<T>&, std::span<const std::size_t>, std::size_t); \
  template AttentionGrads<T> attention_backward(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                                const BasicTensor<T>&, const AttentionCache<T>&,                 \
                                                const BasicTensor<T>&, std::span<const std::size_t>, std::size_t); \
  template CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,     \
                                                       std::span<const ClassMask>);                              \
  template CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>,     \
                                                       const ClassMask&);

TVCL_INSTANTIATE_OPS(float)
TVCL_INSTANTIATE_OPS(double)

#undef TVCL_INSTANTIATE_OPS

}  // namespace tvcl::ops
