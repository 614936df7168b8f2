#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cbvit/rng.hpp"
#include "cbvit/tensor.hpp"

namespace cbvit {

enum class Aggregation { mean, max, class_token };
enum class UniformHead { none, replace, append };

namespace detail {

// Row-wise stabilized softmax with the row sum accumulated in double so that
// even float rows sum to 1 within a few ulps.
template <typename T>
void softmax_rows_raw(const T* in, T* out, int rows, int cols, T lambda) {
  for (int r = 0; r < rows; ++r) {
    const T* x = in + static_cast<std::size_t>(r) * cols;
    T* y = out + static_cast<std::size_t>(r) * cols;
    T m = x[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, x[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double e = std::exp(static_cast<double>(lambda) * (static_cast<double>(x[c]) - static_cast<double>(m)));
      y[c] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int c = 0; c < cols; ++c) y[c] = static_cast<T>(static_cast<double>(y[c]) * inv);
  }
}

// C[m,n] += A[m,k] * B[k,n], plain ikj loop; auto-vectorizes well enough for
// desk-scale models.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A^T[k,m]^T * B[k,n]  (i.e. A is stored [k,m])
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where B is stored [n,k]
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename T>
T gelu_scalar(T x) {
  const double xd = static_cast<double>(x);
  return static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const double xd = static_cast<double>(x);
  const double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
  return static_cast<T>(phi + xd * pdf);
}

struct TokenView {
  int batches;
  int tokens;
  int channels;
};

inline TokenView token_view(const std::vector<int>& shape) {
  if (shape.size() == 2) return {1, shape[0], shape[1]};
  if (shape.size() == 3) return {shape[0], shape[1], shape[2]};
  throw std::invalid_argument("expected a [N,d] or [B,N,d] token tensor");
}

}  // namespace detail

// Options for one fused multi-head self-attention node.
template <typename T>
struct MsaSpec {
  int heads = 1;
  int head_dim = 1;
  T scale = T(1);                           // softmax logit scale
  UniformHead uniform = UniformHead::none;  // fixed 1/N head, if any
};

// Reverse-mode tape. Nodes are appended in execution order, so parents always
// precede children and backward() is a single reverse sweep. One graph per
// forward pass; backward is single-writer over the tape.
template <typename T>
class Graph {
 public:
  using Id = int;

  Id input(Tensor<T> value, bool requires_grad = false) {
    if (!value.all_finite()) throw std::invalid_argument("input: non-finite values");
    return push_leaf(std::move(value), requires_grad);
  }

  const Tensor<T>& value(Id id) const { return node(id).value; }
  bool requires_grad(Id id) const { return node(id).requires_grad; }
  bool has_grad(Id id) const { return !node(id).grad.empty(); }

  const Tensor<T>& grad(Id id) const {
    const NodeData& n = node(id);
    if (n.grad.empty()) throw std::runtime_error("grad: no gradient recorded for this node");
    return n.grad;
  }

  // Gradient of a leaf after backward; zero tensor if the loss never touched it.
  Tensor<T> grad_or_zero(Id id) const {
    const NodeData& n = node(id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Id loss) {
    NodeData& top = node(loss);
    if (top.value.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!top.requires_grad)
      throw std::invalid_argument("backward: loss is detached from every differentiable input");
    for (NodeData& n : nodes_) n.grad = Tensor<T>();
    grad_buf(loss).fill(T(1));
    for (Id i = loss; i >= 0; --i) {
      NodeData& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backprop && !n.grad.empty()) n.backprop(*this);
    }
  }

  // ---- elementwise / shape ops -------------------------------------------

  Id add(Id a, Id b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    const Id y = push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      g.accumulate(a, gy.data(), gy.numel());
      g.accumulate(b, gy.data(), gy.numel());
    });
    return y;
  }

  Id mul(Id a, Id b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      if (g.requires_grad(a)) {
        Tensor<T>& ga = g.grad_buf(a);
        const Tensor<T>& vb = g.value(b);
        for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * vb[i];
      }
      if (g.requires_grad(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        const Tensor<T>& va = g.value(a);
        for (std::size_t i = 0; i < gy.numel(); ++i) gb[i] += gy[i] * va[i];
      }
    });
  }

  Id scale(Id a, T c) {
    Tensor<T> out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return push(std::move(out), requires_grad(a), [a, c](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      Tensor<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += c * gy[i];
    });
  }

  Id sum(Id a) {
    double acc = 0.0;
    const Tensor<T>& va = value(a);
    for (std::size_t i = 0; i < va.numel(); ++i) acc += static_cast<double>(va[i]);
    return push(Tensor<T>::scalar(static_cast<T>(acc)), requires_grad(a), [a](Graph& g, Id self) {
      const T gy = g.grad(self)[0];
      Tensor<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy;
    });
  }

  // y[..., j] = x[..., j] + b[j]
  Id add_bias(Id a, Id b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (vb.ndim() != 1 || vb.cols() != va.cols())
      throw std::invalid_argument("add_bias: bias must match the last axis");
    Tensor<T> out = va;
    const int rows = out.rows(), cols = out.cols();
    for (int r = 0; r < rows; ++r) {
      T* y = out.row_ptr(r);
      for (int c = 0; c < cols; ++c) y[c] += vb[static_cast<std::size_t>(c)];
    }
    return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      g.accumulate(a, gy.data(), gy.numel());
      if (g.requires_grad(b)) {
        Tensor<T>& gb = g.grad_buf(b);
        const int rows = gy.rows(), cols = gy.cols();
        for (int r = 0; r < rows; ++r) {
          const T* row = gy.row_ptr(r);
          for (int c = 0; c < cols; ++c) gb[static_cast<std::size_t>(c)] += row[c];
        }
      }
    });
  }

  // ---- linear algebra ------------------------------------------------------

  // y[..., n] = x[..., k] @ w[k, n]; leading axes of x are flattened.
  Id matmul(Id a, Id w) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vw = value(w);
    if (vw.ndim() != 2 || va.cols() != vw.extent(0))
      throw std::invalid_argument("matmul: inner dimensions disagree");
    const int m = va.rows(), k = va.cols(), n = vw.extent(1);
    std::vector<int> out_shape = va.shape();
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    detail::gemm_acc(va.data(), vw.data(), out.data(), m, k, n);
    return push(std::move(out), requires_grad(a) || requires_grad(w),
                [a, w, m, k, n](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  if (g.requires_grad(a))
                    detail::gemm_nt_acc(gy.data(), g.value(w).data(), g.grad_buf(a).data(), m, n, k);
                  if (g.requires_grad(w))
                    detail::gemm_tn_acc(g.value(a).data(), gy.data(), g.grad_buf(w).data(), k, m, n);
                });
  }

  // ---- nonlinearities -------------------------------------------------------

  // Exact erf-form GELU, x * Phi(x). The tanh approximation would break the
  // hand-computed oracles, so it is not offered.
  Id gelu(Id a) {
    const Tensor<T>& va = value(a);
    if (!va.all_finite()) throw std::invalid_argument("gelu: non-finite input");
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = detail::gelu_scalar(out[i]);
    return push(std::move(out), requires_grad(a), [a](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      const Tensor<T>& vx = g.value(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < gy.numel(); ++i)
        ga[i] += gy[i] * detail::gelu_grad_scalar(vx[i]);
    });
  }

  Id softmax_rows(Id a, T lambda) {
    const Tensor<T>& va = value(a);
    if (lambda <= T(0)) throw std::invalid_argument("softmax_rows: lambda must be positive");
    if (!va.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
    Tensor<T> out(va.shape());
    detail::softmax_rows_raw(va.data(), out.data(), va.rows(), va.cols(), lambda);
    return push(std::move(out), requires_grad(a), [a, lambda](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      const Tensor<T>& y = g.value(self);
      Tensor<T>& ga = g.grad_buf(a);
      const int rows = y.rows(), cols = y.cols();
      for (int r = 0; r < rows; ++r) {
        const T* yr = y.row_ptr(r);
        const T* gr = gy.row_ptr(r);
        T* out = ga.row_ptr(r);
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += static_cast<double>(gr[c]) * yr[c];
        for (int c = 0; c < cols; ++c)
          out[c] += lambda * yr[c] * (gr[c] - static_cast<T>(dot));
      }
    });
  }

  // LayerNorm over the last axis with learnable gamma/beta.
  Id layer_norm(Id a, Id gamma, Id beta, T eps) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vg = value(gamma);
    const Tensor<T>& vb = value(beta);
    const int cols = va.cols();
    if (vg.ndim() != 1 || vb.ndim() != 1 || vg.cols() != cols || vb.cols() != cols)
      throw std::invalid_argument("layer_norm: gamma/beta must match the last axis");
    if (eps < T(0)) throw std::invalid_argument("layer_norm: eps must be non-negative");
    const int rows = va.rows();
    Tensor<T> out(va.shape());
    // keep x_hat and 1/sigma for the backward pass
    auto xhat = std::make_shared<Tensor<T>>(va.shape());
    auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      const T* x = va.row_ptr(r);
      double mean = 0.0;
      for (int c = 0; c < cols; ++c) mean += static_cast<double>(x[c]);
      mean /= cols;
      double var = 0.0;
      for (int c = 0; c < cols; ++c) {
        const double d = static_cast<double>(x[c]) - mean;
        var += d * d;
      }
      var /= cols;
      const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*inv_sigma)[static_cast<std::size_t>(r)] = static_cast<T>(is);
      T* xh = xhat->row_ptr(r);
      T* y = out.row_ptr(r);
      for (int c = 0; c < cols; ++c) {
        xh[c] = static_cast<T>((static_cast<double>(x[c]) - mean) * is);
        y[c] = vg[static_cast<std::size_t>(c)] * xh[c] + vb[static_cast<std::size_t>(c)];
      }
    }
    return push(std::move(out),
                requires_grad(a) || requires_grad(gamma) || requires_grad(beta),
                [a, gamma, beta, xhat, inv_sigma](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  const int rows = gy.rows(), cols = gy.cols();
                  const Tensor<T>& vg = g.value(gamma);
                  if (g.requires_grad(beta)) {
                    Tensor<T>& gb = g.grad_buf(beta);
                    for (int r = 0; r < rows; ++r) {
                      const T* gr = gy.row_ptr(r);
                      for (int c = 0; c < cols; ++c) gb[static_cast<std::size_t>(c)] += gr[c];
                    }
                  }
                  if (g.requires_grad(gamma)) {
                    Tensor<T>& gg = g.grad_buf(gamma);
                    for (int r = 0; r < rows; ++r) {
                      const T* gr = gy.row_ptr(r);
                      const T* xh = xhat->row_ptr(r);
                      for (int c = 0; c < cols; ++c) gg[static_cast<std::size_t>(c)] += gr[c] * xh[c];
                    }
                  }
                  if (g.requires_grad(a)) {
                    Tensor<T>& ga = g.grad_buf(a);
                    for (int r = 0; r < rows; ++r) {
                      const T* gr = gy.row_ptr(r);
                      const T* xh = xhat->row_ptr(r);
                      T* out = ga.row_ptr(r);
                      double mu = 0.0, mx = 0.0;
                      for (int c = 0; c < cols; ++c) {
                        const double u = static_cast<double>(gr[c]) * vg[static_cast<std::size_t>(c)];
                        mu += u;
                        mx += u * xh[c];
                      }
                      mu /= cols;
                      mx /= cols;
                      const T is = (*inv_sigma)[static_cast<std::size_t>(r)];
                      for (int c = 0; c < cols; ++c) {
                        const double u = static_cast<double>(gr[c]) * vg[static_cast<std::size_t>(c)];
                        out[c] += static_cast<T>((u - mu - static_cast<double>(xh[c]) * mx) * is);
                      }
                    }
                  }
                });
  }

  // Mean softmax cross-entropy over rows of [B, C] logits, with optional
  // label smoothing.
  Id cross_entropy(Id logits, const std::vector<int>& labels, T smoothing = T(0)) {
    const Tensor<T>& z = value(logits);
    if (z.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be [batch, classes]");
    const int batch = z.extent(0), classes = z.extent(1);
    if (static_cast<int>(labels.size()) != batch)
      throw std::invalid_argument("cross_entropy: one label per row required");
    for (int y : labels)
      if (y < 0 || y >= classes) throw std::invalid_argument("cross_entropy: label out of range");
    const double eps = static_cast<double>(smoothing);
    auto probs = std::make_shared<Tensor<T>>(z.shape());
    double loss = 0.0;
    for (int r = 0; r < batch; ++r) {
      const T* row = z.row_ptr(r);
      T m = row[0];
      for (int c = 1; c < classes; ++c) m = std::max(m, row[c]);
      double lse = 0.0;
      for (int c = 0; c < classes; ++c) lse += std::exp(static_cast<double>(row[c]) - static_cast<double>(m));
      lse = std::log(lse) + static_cast<double>(m);
      T* p = probs->row_ptr(r);
      for (int c = 0; c < classes; ++c) {
        const double logp = static_cast<double>(row[c]) - lse;
        p[c] = static_cast<T>(std::exp(logp));
        const double q = (c == labels[static_cast<std::size_t>(r)] ? 1.0 - eps : 0.0) + eps / classes;
        loss -= q * logp;
      }
    }
    loss /= batch;
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return push(Tensor<T>::scalar(static_cast<T>(loss)), requires_grad(logits),
                [logits, probs, labels_copy, eps, batch, classes](Graph& g, Id self) {
                  const T gy = g.grad(self)[0];
                  Tensor<T>& gl = g.grad_buf(logits);
                  for (int r = 0; r < batch; ++r) {
                    const T* p = probs->row_ptr(r);
                    T* out = gl.row_ptr(r);
                    const int y = (*labels_copy)[static_cast<std::size_t>(r)];
                    for (int c = 0; c < classes; ++c) {
                      const double q = (c == y ? 1.0 - eps : 0.0) + eps / classes;
                      out[c] += gy * static_cast<T>((static_cast<double>(p[c]) - q) / batch);
                    }
                  }
                });
  }

  // ---- image / token plumbing ----------------------------------------------

  // (x - mean_c) / std_c per channel of a [B, H, W, C] image batch.
  Id normalize_channels(Id a, const std::vector<T>& mean, const std::vector<T>& stdev) {
    const Tensor<T>& va = value(a);
    if (va.ndim() != 4) throw std::invalid_argument("normalize_channels: expected [B,H,W,C]");
    const int channels = va.extent(3);
    if (static_cast<int>(mean.size()) != channels || static_cast<int>(stdev.size()) != channels)
      throw std::invalid_argument("normalize_channels: stats do not match channel count");
    for (T s : stdev)
      if (!(s > T(0))) throw std::invalid_argument("normalize_channels: std must be positive");
    Tensor<T> out = va;
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const int c = static_cast<int>(i % channels);
      out[i] = (out[i] - mean[static_cast<std::size_t>(c)]) / stdev[static_cast<std::size_t>(c)];
    }
    auto inv = std::make_shared<std::vector<T>>(stdev);
    for (T& s : *inv) s = T(1) / s;
    return push(std::move(out), requires_grad(a), [a, inv, channels](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      Tensor<T>& ga = g.grad_buf(a);
      const std::size_t n = gy.numel();
      for (std::size_t i = 0; i < n; ++i)
        ga[i] += gy[i] * (*inv)[i % channels];
    });
  }

  // [B, H, W, C] -> [B, P, patch*patch*C] non-overlapping patches, row-major
  // within each patch.
  Id patchify(Id a, int patch) {
    const Tensor<T>& va = value(a);
    if (va.ndim() != 4) throw std::invalid_argument("patchify: expected [B,H,W,C]");
    const int b = va.extent(0), h = va.extent(1), w = va.extent(2), ch = va.extent(3);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
      throw std::invalid_argument("patchify: image size not divisible by patch size");
    const int gh = h / patch, gw = w / patch, p = gh * gw, plen = patch * patch * ch;
    Tensor<T> out({b, p, plen});
    for (int bi = 0; bi < b; ++bi)
      for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
          T* dst = out.data() + ((static_cast<std::size_t>(bi) * p + py * gw + px)) * plen;
          for (int dy = 0; dy < patch; ++dy) {
            const T* src = va.data() +
                           ((static_cast<std::size_t>(bi) * h + (py * patch + dy)) * w + px * patch) * ch;
            std::memcpy(dst + (static_cast<std::size_t>(dy) * patch) * ch, src,
                        sizeof(T) * static_cast<std::size_t>(patch) * ch);
          }
        }
    return push(std::move(out), requires_grad(a), [a, b, h, w, ch, patch, gh, gw, p, plen](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      Tensor<T>& ga = g.grad_buf(a);
      for (int bi = 0; bi < b; ++bi)
        for (int py = 0; py < gh; ++py)
          for (int px = 0; px < gw; ++px) {
            const T* src = gy.data() + ((static_cast<std::size_t>(bi) * p + py * gw + px)) * plen;
            for (int dy = 0; dy < patch; ++dy) {
              T* dst = ga.data() +
                       ((static_cast<std::size_t>(bi) * h + (py * patch + dy)) * w + px * patch) * ch;
              const T* s = src + (static_cast<std::size_t>(dy) * patch) * ch;
              for (int i = 0; i < patch * ch; ++i) dst[i] += s[i];
            }
          }
    });
  }

  // Prepend a learned class token (shared across the batch) as row 0.
  Id concat_class(Id tokens, Id cls) {
    const Tensor<T>& vt = value(tokens);
    const Tensor<T>& vc = value(cls);
    if (vt.ndim() != 3) throw std::invalid_argument("concat_class: expected [B,P,d] tokens");
    const int b = vt.extent(0), p = vt.extent(1), d = vt.extent(2);
    if (vc.ndim() != 1 || vc.cols() != d)
      throw std::invalid_argument("concat_class: class token width mismatch");
    Tensor<T> out({b, p + 1, d});
    for (int bi = 0; bi < b; ++bi) {
      T* dst = out.data() + static_cast<std::size_t>(bi) * (p + 1) * d;
      std::memcpy(dst, vc.data(), sizeof(T) * static_cast<std::size_t>(d));
      std::memcpy(dst + d, vt.data() + static_cast<std::size_t>(bi) * p * d,
                  sizeof(T) * static_cast<std::size_t>(p) * d);
    }
    return push(std::move(out), requires_grad(tokens) || requires_grad(cls),
                [tokens, cls, b, p, d](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  if (g.requires_grad(cls)) {
                    Tensor<T>& gc = g.grad_buf(cls);
                    for (int bi = 0; bi < b; ++bi) {
                      const T* src = gy.data() + static_cast<std::size_t>(bi) * (p + 1) * d;
                      for (int c = 0; c < d; ++c) gc[static_cast<std::size_t>(c)] += src[c];
                    }
                  }
                  if (g.requires_grad(tokens)) {
                    Tensor<T>& gt = g.grad_buf(tokens);
                    for (int bi = 0; bi < b; ++bi) {
                      const T* src = gy.data() + static_cast<std::size_t>(bi) * (p + 1) * d + d;
                      T* dst = gt.data() + static_cast<std::size_t>(bi) * p * d;
                      for (std::size_t i = 0; i < static_cast<std::size_t>(p) * d; ++i) dst[i] += src[i];
                    }
                  }
                });
  }

  // y[b] = x[b] + rows, broadcasting a [N, d] tensor over the batch.
  Id add_rows(Id a, Id rows) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vr = value(rows);
    const auto tv = detail::token_view(va.shape());
    if (vr.ndim() != 2 || vr.extent(0) != tv.tokens || vr.extent(1) != tv.channels)
      throw std::invalid_argument("add_rows: broadcast shape mismatch");
    Tensor<T> out = va;
    const std::size_t slab = static_cast<std::size_t>(tv.tokens) * tv.channels;
    for (int bi = 0; bi < tv.batches; ++bi) {
      T* dst = out.data() + bi * slab;
      for (std::size_t i = 0; i < slab; ++i) dst[i] += vr[i];
    }
    return push(std::move(out), requires_grad(a) || requires_grad(rows),
                [a, rows, tv, slab](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  g.accumulate(a, gy.data(), gy.numel());
                  if (g.requires_grad(rows)) {
                    Tensor<T>& gr = g.grad_buf(rows);
                    for (int bi = 0; bi < tv.batches; ++bi) {
                      const T* src = gy.data() + bi * slab;
                      for (std::size_t i = 0; i < slab; ++i) gr[i] += src[i];
                    }
                  }
                });
  }

  // Extract token row r from every batch item: [B, N, d] -> [B, d].
  Id take_row(Id a, int row) {
    const Tensor<T>& va = value(a);
    const auto tv = detail::token_view(va.shape());
    if (row < 0 || row >= tv.tokens) throw std::invalid_argument("take_row: row out of range");
    Tensor<T> out({tv.batches, tv.channels});
    const std::size_t slab = static_cast<std::size_t>(tv.tokens) * tv.channels;
    for (int bi = 0; bi < tv.batches; ++bi)
      std::memcpy(out.row_ptr(bi), va.data() + bi * slab + static_cast<std::size_t>(row) * tv.channels,
                  sizeof(T) * static_cast<std::size_t>(tv.channels));
    return push(std::move(out), requires_grad(a), [a, row, tv, slab](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      Tensor<T>& ga = g.grad_buf(a);
      for (int bi = 0; bi < tv.batches; ++bi) {
        T* dst = ga.data() + bi * slab + static_cast<std::size_t>(row) * tv.channels;
        const T* src = gy.row_ptr(bi);
        for (int c = 0; c < tv.channels; ++c) dst[c] += src[c];
      }
    });
  }

  // Inverted dropout; draws one mask per call from the supplied rng.
  Id dropout(Id a, T rate, Rng& rng) {
    if (rate < T(0) || rate >= T(1)) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (rate == T(0)) return a;
    const Tensor<T>& va = value(a);
    auto mask = std::make_shared<Tensor<T>>(va.shape());
    const T keep = T(1) - rate;
    Tensor<T> out = va;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const T m = rng.uniform() < static_cast<double>(rate) ? T(0) : T(1) / keep;
      (*mask)[i] = m;
      out[i] *= m;
    }
    return push(std::move(out), requires_grad(a), [a, mask](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      Tensor<T>& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < gy.numel(); ++i) ga[i] += gy[i] * (*mask)[i];
    });
  }

  // ---- context broadcasting family -----------------------------------------

  // Mean blend y_i = (x_i + ctx) / 2, with the context vector chosen by
  // the aggregation method (mean reproduces CB exactly). exclude_class drops
  // row 0 from the aggregation only; the blend still applies to every row.
  Id context_blend(Id a, Aggregation agg, bool exclude_class = false) {
    const Tensor<T>& va = value(a);
    const auto tv = detail::token_view(va.shape());
    check_context_pre(tv, exclude_class);
    Tensor<T> out(va.shape());
    auto argmax = agg == Aggregation::max
                      ? std::make_shared<std::vector<int>>(static_cast<std::size_t>(tv.batches) * tv.channels)
                      : nullptr;
    std::vector<T> ctx(static_cast<std::size_t>(tv.channels));
    for (int bi = 0; bi < tv.batches; ++bi) {
      const T* x = va.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      aggregate_raw(x, tv, agg, exclude_class, ctx.data(),
                    argmax ? argmax->data() + static_cast<std::size_t>(bi) * tv.channels : nullptr);
      T* y = out.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      for (int t = 0; t < tv.tokens; ++t)
        for (int c = 0; c < tv.channels; ++c)
          y[static_cast<std::size_t>(t) * tv.channels + c] =
              (x[static_cast<std::size_t>(t) * tv.channels + c] + ctx[static_cast<std::size_t>(c)]) / T(2);
    }
    return push(std::move(out), requires_grad(a),
                [a, tv, agg, exclude_class, argmax](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  Tensor<T>& ga = g.grad_buf(a);
                  context_backward(gy, ga, tv, agg, exclude_class, argmax.get(), /*blend=*/true, nullptr);
                });
  }

  // Dimension-scaled injection: y_i = x_i + lambda ⊙ ctx.
  Id context_scaled(Id a, Id lambda_vec, Aggregation agg, bool exclude_class = false) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vl = value(lambda_vec);
    const auto tv = detail::token_view(va.shape());
    check_context_pre(tv, exclude_class);
    if (vl.ndim() != 1 || vl.cols() != tv.channels)
      throw std::invalid_argument("context_scaled: scaling vector must match the channel axis");
    Tensor<T> out(va.shape());
    auto argmax = agg == Aggregation::max
                      ? std::make_shared<std::vector<int>>(static_cast<std::size_t>(tv.batches) * tv.channels)
                      : nullptr;
    auto contexts = std::make_shared<Tensor<T>>(std::vector<int>{tv.batches, tv.channels});
    for (int bi = 0; bi < tv.batches; ++bi) {
      const T* x = va.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      T* ctx = contexts->row_ptr(bi);
      aggregate_raw(x, tv, agg, exclude_class, ctx,
                    argmax ? argmax->data() + static_cast<std::size_t>(bi) * tv.channels : nullptr);
      T* y = out.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      for (int t = 0; t < tv.tokens; ++t)
        for (int c = 0; c < tv.channels; ++c)
          y[static_cast<std::size_t>(t) * tv.channels + c] =
              x[static_cast<std::size_t>(t) * tv.channels + c] +
              vl[static_cast<std::size_t>(c)] * ctx[c];
    }
    return push(std::move(out), requires_grad(a) || requires_grad(lambda_vec),
                [a, lambda_vec, tv, agg, exclude_class, argmax, contexts](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  Tensor<T>* ga = g.requires_grad(a) ? &g.grad_buf(a) : nullptr;
                  Tensor<T>* gl = g.requires_grad(lambda_vec) ? &g.grad_buf(lambda_vec) : nullptr;
                  const Tensor<T>& vl = g.value(lambda_vec);
                  if (ga)
                    context_backward(gy, *ga, tv, agg, exclude_class, argmax.get(), /*blend=*/false, &vl);
                  if (gl) {
                    // dL/dlambda_c = sum_b ctx[b,c] * sum_t gy[b,t,c]
                    for (int bi = 0; bi < tv.batches; ++bi) {
                      const T* ctx = contexts->row_ptr(bi);
                      const T* gslab = gy.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
                      for (int c = 0; c < tv.channels; ++c) {
                        T acc = T(0);
                        for (int t = 0; t < tv.tokens; ++t)
                          acc += gslab[static_cast<std::size_t>(t) * tv.channels + c];
                        (*gl)[static_cast<std::size_t>(c)] += ctx[c] * acc;
                      }
                    }
                  }
                });
  }

  // Class-token gate: y_i = x_i ⊙ (x_0 + 1) for every token, row 0 included.
  Id class_gate(Id a) {
    const Tensor<T>& va = value(a);
    const auto tv = detail::token_view(va.shape());
    if (tv.tokens < 1) throw std::invalid_argument("class_gate: empty token sequence");
    Tensor<T> out(va.shape());
    for (int bi = 0; bi < tv.batches; ++bi) {
      const T* x = va.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      T* y = out.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      const T* x0 = x;  // class token row
      for (int t = 0; t < tv.tokens; ++t)
        for (int c = 0; c < tv.channels; ++c)
          y[static_cast<std::size_t>(t) * tv.channels + c] =
              x[static_cast<std::size_t>(t) * tv.channels + c] * (x0[c] + T(1));
    }
    return push(std::move(out), requires_grad(a), [a, tv](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      const Tensor<T>& vx = g.value(a);
      Tensor<T>& ga = g.grad_buf(a);
      for (int bi = 0; bi < tv.batches; ++bi) {
        const std::size_t base = static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
        const T* x = vx.data() + base;
        const T* gyb = gy.data() + base;
        T* gab = ga.data() + base;
        for (int c = 0; c < tv.channels; ++c) {
          const T x0 = x[c];
          // y_0 = x_0^2 + x_0, y_t = x_t (x_0 + 1) for t >= 1
          T dg0 = gyb[c] * (T(2) * x0 + T(1));
          for (int t = 1; t < tv.tokens; ++t) {
            const std::size_t i = static_cast<std::size_t>(t) * tv.channels + c;
            gab[i] += gyb[i] * (x0 + T(1));
            dg0 += gyb[i] * x[i];
          }
          gab[c] += dg0;
        }
      }
    });
  }

  // Hybrid of gate and blend: y_i = x_i ⊙ x_0 + (x_i + mean_j x_j) / 2.
  Id class_hybrid(Id a, bool exclude_class = false) {
    const Tensor<T>& va = value(a);
    const auto tv = detail::token_view(va.shape());
    check_context_pre(tv, exclude_class);
    Tensor<T> out(va.shape());
    std::vector<T> ctx(static_cast<std::size_t>(tv.channels));
    for (int bi = 0; bi < tv.batches; ++bi) {
      const T* x = va.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      aggregate_raw(x, tv, Aggregation::mean, exclude_class, ctx.data(), nullptr);
      T* y = out.data() + static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      const T* x0 = x;
      for (int t = 0; t < tv.tokens; ++t)
        for (int c = 0; c < tv.channels; ++c) {
          const std::size_t i = static_cast<std::size_t>(t) * tv.channels + c;
          y[i] = x[i] * x0[c] + (x[i] + ctx[static_cast<std::size_t>(c)]) / T(2);
        }
    }
    return push(std::move(out), requires_grad(a), [a, tv, exclude_class](Graph& g, Id self) {
      const Tensor<T>& gy = g.grad(self);
      const Tensor<T>& vx = g.value(a);
      Tensor<T>& ga = g.grad_buf(a);
      const int first = exclude_class ? 1 : 0;
      const T wmean = T(1) / T(tv.tokens - first);
      for (int bi = 0; bi < tv.batches; ++bi) {
        const std::size_t base = static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
        const T* x = vx.data() + base;
        const T* gyb = gy.data() + base;
        T* gab = ga.data() + base;
        for (int c = 0; c < tv.channels; ++c) {
          const T x0 = x[c];
          T gsum = T(0);
          for (int t = 0; t < tv.tokens; ++t) gsum += gyb[static_cast<std::size_t>(t) * tv.channels + c];
          // blend part: dx_k += g_k / 2 + w_k * gsum / 2 with w over included rows
          for (int t = first; t < tv.tokens; ++t)
            gab[static_cast<std::size_t>(t) * tv.channels + c] += wmean * gsum / T(2);
          T dg0 = gyb[c] * (T(2) * x0) + gyb[c] / T(2);
          for (int t = 1; t < tv.tokens; ++t) {
            const std::size_t i = static_cast<std::size_t>(t) * tv.channels + c;
            gab[i] += gyb[i] * x0 + gyb[i] / T(2);
            dg0 += gyb[i] * x[i];
          }
          gab[c] += dg0;
        }
      }
    });
  }

  // ---- fused multi-head self-attention --------------------------------------

  // Standard MSA with optional fixed uniform head. Weight column layouts per
  // uniform mode, with hd = head_dim and h = heads:
  //   none:    wq,wk: [d, h*hd]       wv: [d, h*hd]       wo: [h*hd, d]
  //   replace: wq,wk: [d, (h-1)*hd]   wv: [d, h*hd]       wo: [h*hd, d]
  //            (head 0 is the uniform head; it has no q/k parameters)
  //   append:  wq,wk: [d, h*hd]       wv: [d, (h+1)*hd]   wo: [(h+1)*hd, d]
  //            (the uniform head runs in parallel as the last head)
  // If attn_sink is non-null it receives one row-stochastic N x N matrix per
  // (batch item, head), batch-major then head order above.
  Id msa(Id x, Id wq, Id bq, Id wk, Id bk, Id wv, Id bv, Id wo, Id bo,
         const MsaSpec<T>& spec, std::vector<Tensor<double>>* attn_sink = nullptr) {
    const Tensor<T>& vx = value(x);
    const auto tv = detail::token_view(vx.shape());
    const int n = tv.tokens, d = tv.channels, hd = spec.head_dim;
    const int learned = spec.uniform == UniformHead::replace ? spec.heads - 1 : spec.heads;
    const bool has_uniform = spec.uniform != UniformHead::none;
    const int total = learned + (has_uniform ? 1 : 0);
    const int dq = learned * hd;
    const int dv = total * hd;
    if (learned < 1)
      throw std::invalid_argument("msa: at least one learned head is required");
    if (hd < 1) throw std::invalid_argument("msa: head_dim must be positive");
    check_mat(wq, d, dq, "msa: wq");
    check_mat(wk, d, dq, "msa: wk");
    check_mat(wv, d, dv, "msa: wv");
    check_mat(wo, dv, d, "msa: wo");
    check_vec(bq, dq, "msa: bq");
    check_vec(bk, dq, "msa: bk");
    check_vec(bv, dv, "msa: bv");
    check_vec(bo, d, "msa: bo");
    // uniform head position in the concat order
    const int uniform_index = spec.uniform == UniformHead::replace ? 0
                              : spec.uniform == UniformHead::append ? total - 1
                                                                    : -1;

    auto q = std::make_shared<Tensor<T>>(project(vx, value(wq), value(bq)));
    auto k = std::make_shared<Tensor<T>>(project(vx, value(wk), value(bk)));
    auto v = std::make_shared<Tensor<T>>(project(vx, value(wv), value(bv)));
    auto attn = std::make_shared<std::vector<Tensor<T>>>();
    attn->reserve(static_cast<std::size_t>(tv.batches) * total);

    auto concat = std::make_shared<Tensor<T>>(std::vector<int>{tv.batches * n, dv});
    for (int bi = 0; bi < tv.batches; ++bi) {
      for (int head = 0; head < total; ++head) {
        const bool is_uniform = head == uniform_index;
        const int vcol = head * hd;
        Tensor<T> a({n, n});
        if (is_uniform) {
          a.fill(T(1) / T(n));
          // output rows are the column means of this head's value slice
          std::vector<T> meanv(static_cast<std::size_t>(hd), T(0));
          for (int t = 0; t < n; ++t) {
            const T* vr = v->row_ptr(bi * n + t) + vcol;
            for (int c = 0; c < hd; ++c) meanv[static_cast<std::size_t>(c)] += vr[c];
          }
          for (T& m : meanv) m /= T(n);
          for (int t = 0; t < n; ++t) {
            T* dst = concat->row_ptr(bi * n + t) + vcol;
            for (int c = 0; c < hd; ++c) dst[c] = meanv[static_cast<std::size_t>(c)];
          }
        } else {
          const int qcol = (spec.uniform == UniformHead::replace ? head - 1 : head) * hd;
          Tensor<T> scores({n, n});
          for (int i = 0; i < n; ++i) {
            const T* qi = q->row_ptr(bi * n + i) + qcol;
            T* srow = scores.row_ptr(i);
            for (int j = 0; j < n; ++j) {
              const T* kj = k->row_ptr(bi * n + j) + qcol;
              T acc = T(0);
              for (int c = 0; c < hd; ++c) acc += qi[c] * kj[c];
              srow[j] = acc;
            }
          }
          detail::softmax_rows_raw(scores.data(), a.data(), n, n, spec.scale);
          for (int i = 0; i < n; ++i) {
            const T* arow = a.row_ptr(i);
            T* dst = concat->row_ptr(bi * n + i) + vcol;
            for (int c = 0; c < hd; ++c) dst[c] = T(0);
            for (int j = 0; j < n; ++j) {
              const T aij = arow[j];
              const T* vr = v->row_ptr(bi * n + j) + vcol;
              for (int c = 0; c < hd; ++c) dst[c] += aij * vr[c];
            }
          }
        }
        if (attn_sink) attn_sink->push_back(a.template cast<double>());
        attn->push_back(std::move(a));
      }
    }

    Tensor<T> out(vx.shape());
    detail::gemm_acc(concat->data(), value(wo).data(), out.data(), tv.batches * n, dv, d);
    {
      const Tensor<T>& vbo = value(bo);
      for (int r = 0; r < tv.batches * n; ++r) {
        T* yr = out.data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) yr[c] += vbo[static_cast<std::size_t>(c)];
      }
    }

    const bool rg = requires_grad(x) || requires_grad(wq) || requires_grad(wk) ||
                    requires_grad(wv) || requires_grad(wo) || requires_grad(bq) ||
                    requires_grad(bk) || requires_grad(bv) || requires_grad(bo);
    const MsaSpec<T> sp = spec;
    return push(std::move(out), rg,
                [x, wq, bq, wk, bk, wv, bv, wo, bo, sp, tv, n, d, hd, total, dq, dv,
                 uniform_index, q, k, v, concat, attn](Graph& g, Id self) {
                  const Tensor<T>& gy = g.grad(self);
                  const int rows = tv.batches * n;
                  // dWo, dbo, dConcat
                  if (g.requires_grad(wo))
                    detail::gemm_tn_acc(concat->data(), gy.data(), g.grad_buf(wo).data(), dv, rows, d);
                  if (g.requires_grad(bo)) {
                    Tensor<T>& gbo = g.grad_buf(bo);
                    for (int r = 0; r < rows; ++r) {
                      const T* row = gy.data() + static_cast<std::size_t>(r) * d;
                      for (int c = 0; c < d; ++c) gbo[static_cast<std::size_t>(c)] += row[c];
                    }
                  }
                  Tensor<T> dconcat({rows, dv});
                  detail::gemm_nt_acc(gy.data(), g.value(wo).data(), dconcat.data(), rows, d, dv);

                  Tensor<T> dq_full({rows, dq});
                  Tensor<T> dk_full({rows, dq});
                  Tensor<T> dv_full({rows, dv});
                  for (int bi = 0; bi < tv.batches; ++bi) {
                    for (int head = 0; head < total; ++head) {
                      const bool is_uniform = head == uniform_index;
                      const int vcol = head * hd;
                      const Tensor<T>& a = (*attn)[static_cast<std::size_t>(bi) * total + head];
                      if (is_uniform) {
                        // dV rows all receive the column mean of dOut
                        std::vector<T> meang(static_cast<std::size_t>(hd), T(0));
                        for (int t = 0; t < n; ++t) {
                          const T* gr = dconcat.row_ptr(bi * n + t) + vcol;
                          for (int c = 0; c < hd; ++c) meang[static_cast<std::size_t>(c)] += gr[c];
                        }
                        for (T& m : meang) m /= T(n);
                        for (int t = 0; t < n; ++t) {
                          T* dst = dv_full.row_ptr(bi * n + t) + vcol;
                          for (int c = 0; c < hd; ++c) dst[c] += meang[static_cast<std::size_t>(c)];
                        }
                        continue;
                      }
                      const int qcol = (sp.uniform == UniformHead::replace ? head - 1 : head) * hd;
                      // dA = dOut V^T ; dV += A^T dOut
                      Tensor<T> da({n, n});
                      for (int i = 0; i < n; ++i) {
                        const T* gr = dconcat.row_ptr(bi * n + i) + vcol;
                        T* darow = da.row_ptr(i);
                        for (int j = 0; j < n; ++j) {
                          const T* vr = v->row_ptr(bi * n + j) + vcol;
                          T acc = T(0);
                          for (int c = 0; c < hd; ++c) acc += gr[c] * vr[c];
                          darow[j] = acc;
                        }
                        const T* arow = a.row_ptr(i);
                        for (int j = 0; j < n; ++j) {
                          T* dst = dv_full.row_ptr(bi * n + j) + vcol;
                          const T aij = arow[j];
                          for (int c = 0; c < hd; ++c) dst[c] += aij * gr[c];
                        }
                      }
                      // softmax backward into dS, then dQ/dK
                      for (int i = 0; i < n; ++i) {
                        const T* arow = a.row_ptr(i);
                        T* darow = da.row_ptr(i);
                        double dot = 0.0;
                        for (int j = 0; j < n; ++j) dot += static_cast<double>(darow[j]) * arow[j];
                        for (int j = 0; j < n; ++j)
                          darow[j] = sp.scale * arow[j] * (darow[j] - static_cast<T>(dot));
                      }
                      for (int i = 0; i < n; ++i) {
                        const T* dsrow = da.row_ptr(i);
                        T* dqi = dq_full.row_ptr(bi * n + i) + qcol;
                        for (int j = 0; j < n; ++j) {
                          const T s = dsrow[j];
                          if (s == T(0)) continue;
                          const T* kj = k->row_ptr(bi * n + j) + qcol;
                          T* dkj = dk_full.row_ptr(bi * n + j) + qcol;
                          const T* qi = q->row_ptr(bi * n + i) + qcol;
                          for (int c = 0; c < hd; ++c) {
                            dqi[c] += s * kj[c];
                            dkj[c] += s * qi[c];
                          }
                        }
                      }
                    }
                  }
                  g.project_backward(x, wq, bq, dq_full);
                  g.project_backward(x, wk, bk, dk_full);
                  g.project_backward(x, wv, bv, dv_full);
                });
  }

 private:
  struct NodeData {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backprop;
  };

  NodeData& node(Id id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const NodeData& node(Id id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  Tensor<T>& grad_buf(Id id) {
    NodeData& n = node(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(Id id, const T* g, std::size_t count) {
    if (!requires_grad(id)) return;
    Tensor<T>& buf = grad_buf(id);
    for (std::size_t i = 0; i < count; ++i) buf[i] += g[i];
  }

  template <typename Fn>
  Id push(Tensor<T> value, bool rg, Fn&& backprop_with_self) {
    const Id id = push_leaf(std::move(value), rg);
    if (rg)
      nodes_.back().backprop = [fn = std::forward<Fn>(backprop_with_self), id](Graph& g) { fn(g, id); };
    return id;
  }

  Id push_leaf(Tensor<T> value, bool rg) {
    const Id id = static_cast<Id>(nodes_.size());
    NodeData n;
    n.value = std::move(value);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return id;
  }

  void check_mat(Id w, int r, int c, const char* what) const {
    const Tensor<T>& v = value(w);
    if (v.ndim() != 2 || v.extent(0) != r || v.extent(1) != c)
      throw std::invalid_argument(std::string(what) + ": bad shape");
  }

  void check_vec(Id b, int len, const char* what) const {
    const Tensor<T>& v = value(b);
    if (v.ndim() != 1 || v.cols() != len)
      throw std::invalid_argument(std::string(what) + ": bad shape");
  }

  static void check_context_pre(const detail::TokenView& tv, bool exclude_class) {
    if (tv.tokens < 1) throw std::invalid_argument("context op: empty token sequence");
    if (exclude_class && tv.tokens < 2)
      throw std::invalid_argument("context op: nothing left after excluding the class token");
  }

  // ctx[c] over the (optionally class-excluded) token rows; argmax_out is the
  // winning row per channel for max aggregation.
  static void aggregate_raw(const T* x, const detail::TokenView& tv, Aggregation agg,
                            bool exclude_class, T* ctx, int* argmax_out) {
    const int first = (agg != Aggregation::class_token && exclude_class) ? 1 : 0;
    switch (agg) {
      case Aggregation::mean: {
        for (int c = 0; c < tv.channels; ++c) {
          double acc = 0.0;
          for (int t = first; t < tv.tokens; ++t)
            acc += static_cast<double>(x[static_cast<std::size_t>(t) * tv.channels + c]);
          ctx[c] = static_cast<T>(acc / (tv.tokens - first));
        }
        break;
      }
      case Aggregation::max: {
        for (int c = 0; c < tv.channels; ++c) {
          T best = x[static_cast<std::size_t>(first) * tv.channels + c];
          int arg = first;
          for (int t = first + 1; t < tv.tokens; ++t) {
            const T v = x[static_cast<std::size_t>(t) * tv.channels + c];
            if (v > best) {
              best = v;
              arg = t;
            }
          }
          ctx[c] = best;
          if (argmax_out) argmax_out[c] = arg;
        }
        break;
      }
      case Aggregation::class_token: {
        for (int c = 0; c < tv.channels; ++c) ctx[c] = x[c];
        break;
      }
    }
  }

  // Shared backward for the blend/scaled context ops. For blend:
  //   dx_k += g_k / 2 + w_k * sum_t g_t / 2
  // For scaled (lambda given): dx_k += g_k + w_k * lambda ⊙ sum_t g_t,
  // where w routes to the mean rows / argmax row / class row.
  static void context_backward(const Tensor<T>& gy, Tensor<T>& ga, const detail::TokenView& tv,
                               Aggregation agg, bool exclude_class, const std::vector<int>* argmax,
                               bool blend, const Tensor<T>* lambda) {
    const int first = (agg != Aggregation::class_token && exclude_class) ? 1 : 0;
    for (int bi = 0; bi < tv.batches; ++bi) {
      const std::size_t base = static_cast<std::size_t>(bi) * tv.tokens * tv.channels;
      const T* gyb = gy.data() + base;
      T* gab = ga.data() + base;
      for (int c = 0; c < tv.channels; ++c) {
        T gsum = T(0);
        for (int t = 0; t < tv.tokens; ++t) gsum += gyb[static_cast<std::size_t>(t) * tv.channels + c];
        // direct term
        for (int t = 0; t < tv.tokens; ++t) {
          const std::size_t i = static_cast<std::size_t>(t) * tv.channels + c;
          gab[i] += blend ? gyb[i] / T(2) : gyb[i];
        }
        // context term
        T routed = blend ? gsum / T(2) : (*lambda)[static_cast<std::size_t>(c)] * gsum;
        switch (agg) {
          case Aggregation::mean: {
            const T w = T(1) / T(tv.tokens - first);
            for (int t = first; t < tv.tokens; ++t)
              gab[static_cast<std::size_t>(t) * tv.channels + c] += w * routed;
            break;
          }
          case Aggregation::max: {
            const int arg = (*argmax)[static_cast<std::size_t>(bi) * tv.channels + c];
            gab[static_cast<std::size_t>(arg) * tv.channels + c] += routed;
            break;
          }
          case Aggregation::class_token:
            gab[c] += routed;
            break;
        }
      }
    }
  }

  static Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const int m = x.rows(), k = x.cols(), n = w.extent(1);
    Tensor<T> out({m, n});
    detail::gemm_acc(x.data(), w.data(), out.data(), m, k, n);
    for (int r = 0; r < m; ++r) {
      T* row = out.row_ptr(r);
      for (int c = 0; c < n; ++c) row[c] += b[static_cast<std::size_t>(c)];
    }
    return out;
  }

  void project_backward(Id x, Id w, Id b, const Tensor<T>& dproj) {
    const Tensor<T>& vx = value(x);
    const int m = vx.rows(), k = vx.cols(), n = dproj.cols();
    if (requires_grad(w)) detail::gemm_tn_acc(vx.data(), dproj.data(), grad_buf(w).data(), k, m, n);
    if (requires_grad(b)) {
      Tensor<T>& gb = grad_buf(b);
      for (int r = 0; r < m; ++r) {
        const T* row = dproj.row_ptr(r);
        for (int c = 0; c < n; ++c) gb[static_cast<std::size_t>(c)] += row[c];
      }
    }
    if (requires_grad(x)) detail::gemm_nt_acc(dproj.data(), value(w).data(), grad_buf(x).data(), m, n, k);
  }

  std::vector<NodeData> nodes_;
};

}  // namespace cbvit
