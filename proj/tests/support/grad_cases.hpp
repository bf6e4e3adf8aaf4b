#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tvcl/random.hpp"
#include "tvcl/tensor.hpp"

namespace tvcl::testing {

template <typename T>
BasicTensor<T> random_tensor(const Shape& shape, SplitMix64& rng, double stddev = 1.0) {
  BasicTensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

struct GradCase {
  std::string name;
  double max_relative_error = 0.0;
};

// Central-difference checks (eps 1e-4, 64-bit) of every backward path for
// one seed: linear, layer norm, activations, attention, LoRA and adapter
// through the whole model, and masked cross-entropy.
std::vector<GradCase> gradient_cases(std::uint64_t seed);

// Same check for every frozen encoder weight (the pretraining path).
double encoder_weight_check(std::uint64_t seed);

}  // namespace tvcl::testing
