#pragma once

#include <functional>
#include <vector>

#include "cbvit/graph.hpp"
#include "cbvit/tensor.hpp"

namespace cbvit {

// Plain (non-recorded) forwards of the basic ops. Each one runs the same code
// as the corresponding graph op so there is exactly one numeric path.

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& s, T lambda) {
  Graph<T> g;
  return g.value(g.softmax_rows(g.input(s), lambda));
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  Graph<T> g;
  return g.value(g.layer_norm(g.input(x), g.input(gamma), g.input(beta), eps));
}

template <typename T>
T gelu(T x) {
  return detail::gelu_scalar(x);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Graph<T> g;
  return g.value(g.gelu(g.input(x)));
}

// Central-difference gradient oracle: (f(t+eps e_i) - f(t-eps e_i)) / (2 eps)
// per coordinate. Only evaluates f, so it is independent of the tape.
template <typename T>
std::vector<T> finite_diff(const std::function<T(const std::vector<T>&)>& f,
                           std::vector<T> theta, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw std::invalid_argument("finite_diff: eps must be positive");
  std::vector<T> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T saved = theta[i];
    theta[i] = saved + eps;
    const T hi = f(theta);
    theta[i] = saved - eps;
    const T lo = f(theta);
    theta[i] = saved;
    grad[i] = (hi - lo) / (T(2) * eps);
  }
  return grad;
}

// Single-coordinate probe of the same difference quotient; used when sampling
// a few coordinates of a large parameter vector.
template <typename T>
T finite_diff_coord(const std::function<T(const std::vector<T>&)>& f, std::vector<T> theta,
                    std::size_t i, T eps = T(1e-5)) {
  if (!(eps > T(0))) throw std::invalid_argument("finite_diff: eps must be positive");
  const T saved = theta.at(i);
  theta[i] = saved + eps;
  const T hi = f(theta);
  theta[i] = saved - eps;
  const T lo = f(theta);
  return (hi - lo) / (T(2) * eps);
}

}  // namespace cbvit
