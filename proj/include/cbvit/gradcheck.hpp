#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cbvit/model.hpp"
#include "cbvit/ops.hpp"
#include "cbvit/rng.hpp"

namespace cbvit {

struct GradcheckReport {
  double worst_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_coord = 0;
  long checked = 0;
  int tensors_checked = 0;
};

// Full-model reverse-mode vs central-difference comparison on a fixed random
// batch. The error metric is |a - fd| / max(|a|, |fd|, 1e-4): a true relative
// error at meaningful gradient magnitudes, an absolute bound of tol * 1e-4
// below them (which still dwarfs central-difference noise).
template <typename T>
GradcheckReport model_gradcheck(Model<T>& model, std::uint64_t seed, int coords_per_tensor = 50,
                                double eps = 1e-5, int batch = 2) {
  const ModelConfig& mc = model.config();
  Rng rng(seed);
  Tensor<T> images({batch, mc.image_size, mc.image_size, mc.channels});
  for (std::size_t i = 0; i < images.numel(); ++i)
    images[i] = static_cast<T>(rng.uniform());
  std::vector<int> labels;
  for (int i = 0; i < batch; ++i) labels.push_back(rng.uniform_int(0, mc.num_classes - 1));

  auto loss_of = [&]() -> double {
    Graph<T> g;
    ForwardOptions opt;
    opt.param_grads = false;
    const auto res = model.forward(g, images, opt);
    return static_cast<double>(g.value(g.cross_entropy(res.logits, labels))[0]);
  };

  // analytic gradients, one backward pass
  {
    Graph<T> g;
    const auto res = model.forward(g, images);
    const auto loss = g.cross_entropy(res.logits, labels);
    g.backward(loss);
    model.pull_grads(g, res);
  }

  GradcheckReport report;
  for (auto& p : model.params()) {
    if (!p.trainable) continue;
    ++report.tensors_checked;
    const std::size_t n = p.value.numel();
    std::vector<std::size_t> coords;
    if (static_cast<std::size_t>(coords_per_tensor) >= n) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      // sample without replacement
      std::vector<std::size_t> all(n);
      for (std::size_t i = 0; i < n; ++i) all[i] = i;
      rng.shuffle(all.begin(), all.end());
      coords.assign(all.begin(), all.begin() + coords_per_tensor);
    }
    for (std::size_t c : coords) {
      const T saved = p.value[c];
      p.value[c] = saved + static_cast<T>(eps);
      const double hi = loss_of();
      p.value[c] = saved - static_cast<T>(eps);
      const double lo = loss_of();
      p.value[c] = saved;
      const double fd = (hi - lo) / (2.0 * eps);
      const double an = static_cast<double>(p.grad.empty() ? T(0) : p.grad[c]);
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-4});
      ++report.checked;
      if (rel > report.worst_rel_error) {
        report.worst_rel_error = rel;
        report.worst_tensor = p.name;
        report.worst_coord = c;
      }
    }
  }
  return report;
}

}  // namespace cbvit
