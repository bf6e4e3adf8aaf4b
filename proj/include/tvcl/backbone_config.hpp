#pragma once

#include <cstddef>

namespace tvcl {

struct BackboneConfig {
  std::size_t vocab_size = 200;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t n_layers = 2;
  std::size_t max_seq_len = 24;
  // Union of every task's label space.
  std::size_t n_total_classes = 20;

  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

}  // namespace tvcl
