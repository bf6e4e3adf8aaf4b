#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "tvcl/error.hpp"

namespace tvcl {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over one flat parameter vector. Moments are kept in double; a zero
// gradient with zero history leaves the parameter untouched.
class Adam {
 public:
  Adam(std::size_t n, AdamOptions options) : options_(options), m_(n, 0.0), v_(n, 0.0) {}

  template <typename T>
  void step(std::span<T> params, std::span<const T> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw DimensionError("Adam::step: parameter count changed");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
      v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g * g;
      if (m_[i] == 0.0) continue;
      const double update = options_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + options_.eps);
      params[i] = static_cast<T>(static_cast<double>(params[i]) - update);
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  AdamOptions options_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

}  // namespace tvcl
