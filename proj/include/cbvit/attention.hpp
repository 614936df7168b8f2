#pragma once

#include <vector>

#include "cbvit/tensor.hpp"

namespace cbvit {

// One attention matrix captured during a forward pass. With batched inputs
// several records share the same (layer, head) pair, one per batch item.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Tensor<double> a;  // N x N, row-stochastic
};

// Normalized [0,1] grid coordinates of the spatial tokens (class token has no
// position and is excluded).
struct TokenPositions {
  Tensor<double> p;  // N_spatial x 2 (row, col)

  static TokenPositions grid(int side) {
    if (side < 1) throw std::invalid_argument("token positions: grid side must be positive");
    Tensor<double> p({side * side, 2});
    const double denom = side > 1 ? static_cast<double>(side - 1) : 1.0;
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        p.at(r * side + c, 0) = r / denom;
        p.at(r * side + c, 1) = c / denom;
      }
    return {std::move(p)};
  }
};

}  // namespace cbvit
