#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbvit/attention.hpp"
#include "cbvit/tensor.hpp"

namespace cbvit {

struct EntropyExcludes {
  bool class_token = true;
  int last_layers = 1;
};

struct EntropyProfile {
  std::vector<double> per_layer;  // mean row entropy, nats
  std::string model_tag;
  EntropyExcludes excludes;
};

// Shannon entropy -sum a_j ln a_j of one attention row, in nats, with
// 0 ln 0 = 0. Errors on anything that is not a probability vector.
double attention_entropy(std::span<const double> a);

// Per-layer mean of row entropies over all heads and included token rows.
EntropyProfile entropy_profile(const std::vector<AttentionRecord>& records,
                               const EntropyExcludes& excludes = {},
                               std::string model_tag = {});

// Jacobian of a = softmax(lambda s) with respect to s, evaluated at the given
// output distribution: J_jk = lambda (1_{j=k} a_j - a_j a_k).
Tensor<double> softmax_jacobian(std::span<const double> a, double lambda);

// ||J||_* via the trace identity for this PSD matrix: sum_j lambda (a_j - a_j^2).
double nuclear_norm_analytic(std::span<const double> a, double lambda);

struct MaximalityReport {
  double bound = 0.0;      // lambda (1 - 1/N)
  double max_found = 0.0;  // best nuclear norm over all probes
  std::vector<double> argmax;
  double margin = 0.0;      // bound - max_found
  double uniform_gap = 0.0; // |bound - nuclear norm at uniform|
  long checked = 0;
  bool violated = false;    // any probe above bound + 1e-12
};

// Samples `trials` distributions uniformly from the simplex, plus all vertices
// and edge midpoints, and checks none exceeds the uniform-attention bound.
MaximalityReport verify_uniform_maximality(int n, double lambda, long trials,
                                           std::uint64_t seed = 0);

// Attention-weighted mean L1 distance between token grid positions over
// ordered spatial pairs i != j. `a` is either N_s x N_s (spatial only) or
// (N_s+1) x (N_s+1) with the class token at row/col 0, which is dropped.
// With renormalize, each row's retained weights are rescaled to sum to 1
// before averaging per row.
double relative_distance(const Tensor<double>& a, const TokenPositions& positions,
                         bool renormalize = false);

struct ScalingStats {
  int layer = 0;
  std::optional<double> ratio;  // q10(|lambda|) / q90(|lambda|); empty if q90 == 0
  double mean = 0.0;            // signed mean of lambda
};

// Quantile ratio and mean of per-layer dimension scaling weights. Quantiles
// use linear interpolation between order statistics.
std::vector<ScalingStats> scaling_stats(
    const std::vector<std::pair<int, std::vector<double>>>& lambda_vecs);

// Linear-interpolation quantile of |values|, exposed for reuse.
double abs_quantile(std::vector<double> values, double q);

}  // namespace cbvit
