#pragma once

#include <vector>

#include "cbvit/graph.hpp"
#include "cbvit/tensor.hpp"

namespace cbvit {

// Context broadcasting family as pure token-sequence transforms. X is [N, d]
// or [B, N, d]; when a class token is involved it sits at row 0.

// cb(x_i) = (x_i + mean_j x_j) / 2
template <typename T>
Tensor<T> cb(const Tensor<T>& x, bool exclude_class = false) {
  Graph<T> g;
  return g.value(g.context_blend(g.input(x), Aggregation::mean, exclude_class));
}

// cb_s(x_i) = x_i + lambda ⊙ mean_j x_j
template <typename T>
Tensor<T> cb_s(const Tensor<T>& x, const Tensor<T>& lambda_vec, bool exclude_class = false) {
  Graph<T> g;
  return g.value(
      g.context_scaled(g.input(x), g.input(lambda_vec), Aggregation::mean, exclude_class));
}

// cb_gate(x_i) = x_i ⊙ (x_0 + 1)
template <typename T>
Tensor<T> cb_gate(const Tensor<T>& x) {
  Graph<T> g;
  return g.value(g.class_gate(g.input(x)));
}

// cb_hybrid(x_i) = x_i ⊙ x_0 + cb(x)_i
template <typename T>
Tensor<T> cb_hybrid(const Tensor<T>& x, bool exclude_class = false) {
  Graph<T> g;
  return g.value(g.class_hybrid(g.input(x), exclude_class));
}

// Context vector for the cb blend: column mean, column max, or the
// class-token row verbatim.
template <typename T>
std::vector<T> aggregate_context(const Tensor<T>& x, Aggregation method,
                                 bool exclude_class = false) {
  const auto tv = detail::token_view(x.shape());
  if (tv.batches != 1) throw std::invalid_argument("aggregate_context: expected a single sequence");
  if (exclude_class && tv.tokens < 2 && method != Aggregation::class_token)
    throw std::invalid_argument("aggregate_context: nothing left after excluding the class token");
  std::vector<T> ctx(static_cast<std::size_t>(tv.channels));
  const int first = (method != Aggregation::class_token && exclude_class) ? 1 : 0;
  switch (method) {
    case Aggregation::mean:
      for (int c = 0; c < tv.channels; ++c) {
        double acc = 0.0;
        for (int t = first; t < tv.tokens; ++t)
          acc += static_cast<double>(x[static_cast<std::size_t>(t) * tv.channels + c]);
        ctx[static_cast<std::size_t>(c)] = static_cast<T>(acc / (tv.tokens - first));
      }
      break;
    case Aggregation::max:
      for (int c = 0; c < tv.channels; ++c) {
        T best = x[static_cast<std::size_t>(first) * tv.channels + c];
        for (int t = first + 1; t < tv.tokens; ++t)
          best = std::max(best, x[static_cast<std::size_t>(t) * tv.channels + c]);
        ctx[static_cast<std::size_t>(c)] = best;
      }
      break;
    case Aggregation::class_token:
      for (int c = 0; c < tv.channels; ++c) ctx[static_cast<std::size_t>(c)] = x[static_cast<std::size_t>(c)];
      break;
  }
  return ctx;
}

}  // namespace cbvit
