#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cbvit/analysis.hpp"
#include "cbvit/dataset.hpp"
#include "cbvit/graph.hpp"
#include "cbvit/model.hpp"
#include "cbvit/rng.hpp"

namespace cbvit {

enum class Precision { f32, f64 };

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double base_lr = -1.0;  // negative selects the 1e-3 * batch_size / 1024 rule
  double min_lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  std::uint64_t seed = 1;
  double label_smoothing = 0.0;
  Precision precision = Precision::f32;

  double resolved_lr() const {
    return base_lr >= 0.0 ? base_lr : 1e-3 * static_cast<double>(batch_size) / 1024.0;
  }

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
      throw std::invalid_argument("train: betas must lie in (0,1)");
    if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (warmup_epochs < 0 || warmup_epochs >= epochs + 1)
      throw std::invalid_argument("train: warmup_epochs out of range");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw std::invalid_argument("train: label_smoothing out of range");
  }
};

// One-cycle cosine schedule with linear warmup from 0.
inline double cosine_lr(long step, long total_steps, long warmup_steps, double base_lr,
                        double min_lr = 0.0) {
  if (step < 0 || step > total_steps || warmup_steps >= total_steps + 1)
    throw std::invalid_argument("cosine_lr: step/warmup out of range");
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Decoupled-weight-decay Adam step with bias-corrected moments, eps = 1e-8.
// t is the 1-based step count.
template <typename T>
void adamw_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long t,
                double lr, double beta1, double beta2, double weight_decay) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw std::invalid_argument("adamw: shape mismatch");
  if (t < 1) throw std::invalid_argument("adamw: step count starts at 1");
  constexpr double eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
    const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
    param[i] = static_cast<T>(static_cast<double>(param[i]) -
                              lr * weight_decay * static_cast<double>(param[i]) - lr * update);
  }
}

struct MetricsRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> layer_entropy;   // all layers, class row excluded
  std::vector<double> layer_distance;  // mean relative distance per layer
};

struct EvalResult {
  double top1 = 0.0;
  double topk = 0.0;
  int k = 5;
};

namespace detail_train {

// Rank of the true label under (logit desc, index asc); ties go to the lower
// class index, so argmax == rank 0.
inline int label_rank(const double* logits, int classes, int label) {
  int rank = 0;
  for (int c = 0; c < classes; ++c) {
    if (c == label) continue;
    if (logits[c] > logits[label] || (logits[c] == logits[label] && c < label)) ++rank;
  }
  return rank;
}

}  // namespace detail_train

template <typename T>
EvalResult evaluate(const Model<T>& model, const SyntheticDataset& ds, int k = 5,
                    int batch_size = 256) {
  if (ds.count() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (model.config().num_classes != ds.num_classes)
    throw std::invalid_argument("evaluate: class count mismatch");
  k = std::min(k, ds.num_classes);
  long hit1 = 0, hitk = 0;
  for (int start = 0; start < ds.count(); start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.count(), start + batch_size); ++i) idx.push_back(i);
    Graph<T> g;
    ForwardOptions opt;
    opt.param_grads = false;
    const auto res = model.forward(g, ds.batch<T>(idx), opt);
    const Tensor<T>& logits = g.value(res.logits);
    std::vector<double> row(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (int c = 0; c < ds.num_classes; ++c) row[static_cast<std::size_t>(c)] = logits.at(static_cast<int>(r), c);
      const int rank = detail_train::label_rank(row.data(), ds.num_classes,
                                                ds.labels[static_cast<std::size_t>(idx[r])]);
      hit1 += rank == 0;
      hitk += rank < k;
    }
  }
  return {static_cast<double>(hit1) / ds.count(), static_cast<double>(hitk) / ds.count(), k};
}

// x_adv = clip(x + eps * sign(dLoss/dx), [0, 1]); image is [H, W, C] in [0, 1].
template <typename T>
Tensor<T> fgsm_attack(const Model<T>& model, const Tensor<T>& image, int label, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("fgsm: epsilon must be >= 0");
  if (image.ndim() != 3) throw std::invalid_argument("fgsm: expected a single [H,W,C] image");
  Tensor<T> batch({1, image.extent(0), image.extent(1), image.extent(2)},
                  std::vector<T>(image.storage()));
  Graph<T> g;
  ForwardOptions opt;
  opt.param_grads = false;
  opt.image_grad = true;
  const auto res = model.forward(g, batch, opt);
  const auto loss = g.cross_entropy(res.logits, {label});
  g.backward(loss);
  const Tensor<T>& grad = g.grad(res.images);
  Tensor<T> adv = image;
  for (std::size_t i = 0; i < adv.numel(); ++i) {
    const T s = grad[i] > T(0) ? T(1) : (grad[i] < T(0) ? T(-1) : T(0));
    adv[i] = std::clamp(adv[i] + static_cast<T>(epsilon) * s, T(0), T(1));
  }
  return adv;
}

struct TrainHooks {
  // called after each epoch's metrics are computed; return false to stop early
  std::function<bool(const MetricsRecord&)> on_epoch;
};

struct TrainOutput {
  std::vector<MetricsRecord> metrics;
};

// Deterministic single-threaded training loop: AdamW, one-cycle cosine
// schedule, per-epoch accuracy plus attention-density diagnostics on a fixed
// probe batch.
template <typename T>
TrainOutput train(Model<T>& model, const TrainConfig& tc, const SyntheticDataset& ds,
                  const TrainHooks& hooks = {}) {
  tc.validate();
  if (model.config().num_classes != ds.num_classes)
    throw std::invalid_argument("train: model/dataset class count mismatch");
  if (model.config().image_size != ds.image_size)
    throw std::invalid_argument("train: model/dataset image size mismatch");

  std::vector<double> mean, stdev;
  ds.channel_stats(mean, stdev);
  model.set_input_norm(std::vector<T>(mean.begin(), mean.end()),
                       std::vector<T>(stdev.begin(), stdev.end()));

  auto& params = model.params();
  std::vector<Tensor<T>> m_state, v_state;
  for (const auto& p : params) {
    m_state.emplace_back(p.value.shape());
    v_state.emplace_back(p.value.shape());
  }

  const long steps_per_epoch = (ds.count() + tc.batch_size - 1) / tc.batch_size;
  const long total_steps = steps_per_epoch * tc.epochs;
  const long warmup_steps = steps_per_epoch * tc.warmup_epochs;
  const double base_lr = tc.resolved_lr();
  const double min_lr = std::min(tc.min_lr, base_lr);  // base_lr = 0 means lr 0 throughout

  // fixed probe batch for the density diagnostics
  std::vector<int> probe_idx;
  for (int i = 0; i < std::min(64, ds.count()); ++i) probe_idx.push_back(i);
  const TokenPositions positions = TokenPositions::grid(model.config().grid());

  Rng shuffle_rng(tc.seed ^ 0x5deece66dull);
  Rng dropout_rng(tc.seed ^ 0xda7a5eedull);
  std::vector<int> order(static_cast<std::size_t>(ds.count()));
  std::iota(order.begin(), order.end(), 0);

  TrainOutput out;
  long step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    double lr = 0.0;
    for (long b = 0; b < steps_per_epoch; ++b) {
      std::vector<int> idx(order.begin() + b * tc.batch_size,
                           order.begin() + std::min<std::size_t>(order.size(), (b + 1) * tc.batch_size));
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int i : idx) labels.push_back(ds.labels[static_cast<std::size_t>(i)]);

      lr = cosine_lr(step, total_steps, warmup_steps, base_lr, min_lr);
      Graph<T> g;
      ForwardOptions opt;
      opt.training = true;
      opt.rng = &dropout_rng;
      const auto res = model.forward(g, ds.batch<T>(idx), opt);
      const auto loss = g.cross_entropy(res.logits, labels, static_cast<T>(tc.label_smoothing));
      const double loss_value = static_cast<double>(g.value(loss)[0]);
      if (!std::isfinite(loss_value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 " step " + std::to_string(b));
      loss_sum += loss_value;
      g.backward(loss);
      model.pull_grads(g, res);
      ++step;
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].trainable) continue;
        adamw_step(params[p].value, params[p].grad, m_state[p], v_state[p], step, lr, tc.beta1,
                   tc.beta2, tc.weight_decay);
      }
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    const EvalResult ev = evaluate(model, ds);
    rec.top1 = ev.top1;
    rec.top5 = ev.topk;

    {
      Graph<T> g;
      ForwardOptions opt;
      opt.param_grads = false;
      opt.record_attention = true;
      const auto res = model.forward(g, ds.batch<T>(probe_idx), opt);
      const int layers = model.config().depth + (model.config().extra_block == ExtraBlock::msa);
      std::vector<double> hsum(static_cast<std::size_t>(layers), 0.0);
      std::vector<double> dsum(static_cast<std::size_t>(layers), 0.0);
      std::vector<long> hcount(static_cast<std::size_t>(layers), 0);
      std::vector<long> dcount(static_cast<std::size_t>(layers), 0);
      for (const AttentionRecord& r : res.records) {
        const int n = r.a.extent(0);
        for (int row = 1; row < n; ++row)
          hsum[static_cast<std::size_t>(r.layer)] +=
              attention_entropy({r.a.row_ptr(row), static_cast<std::size_t>(n)});
        hcount[static_cast<std::size_t>(r.layer)] += n - 1;
        dsum[static_cast<std::size_t>(r.layer)] += relative_distance(r.a, positions);
        dcount[static_cast<std::size_t>(r.layer)] += 1;
      }
      for (int l = 0; l < layers; ++l) {
        rec.layer_entropy.push_back(hcount[static_cast<std::size_t>(l)]
                                        ? hsum[static_cast<std::size_t>(l)] / hcount[static_cast<std::size_t>(l)]
                                        : 0.0);
        rec.layer_distance.push_back(dcount[static_cast<std::size_t>(l)]
                                         ? dsum[static_cast<std::size_t>(l)] / dcount[static_cast<std::size_t>(l)]
                                         : 0.0);
      }
    }

    out.metrics.push_back(rec);
    if (hooks.on_epoch && !hooks.on_epoch(out.metrics.back())) break;
  }
  return out;
}

}  // namespace cbvit
