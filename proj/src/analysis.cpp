#include "cbvit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "cbvit/rng.hpp"

namespace cbvit {

namespace {

void check_distribution(std::span<const double> a) {
  if (a.empty()) throw std::invalid_argument("attention row is empty");
  double sum = 0.0;
  for (double v : a) {
    if (!std::isfinite(v) || v < 0.0)
      throw std::invalid_argument("attention row is not a probability distribution");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("attention row does not sum to 1");
}

}  // namespace

double attention_entropy(std::span<const double> a) {
  check_distribution(a);
  double h = 0.0;
  for (double v : a)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

EntropyProfile entropy_profile(const std::vector<AttentionRecord>& records,
                               const EntropyExcludes& excludes, std::string model_tag) {
  if (records.empty()) throw std::invalid_argument("entropy_profile: no attention records");
  std::map<int, std::pair<double, long>> acc;  // layer -> (sum, count)
  for (const AttentionRecord& rec : records) {
    const int n = rec.a.extent(0);
    const int first = excludes.class_token ? 1 : 0;
    for (int r = first; r < n; ++r) {
      const double h = attention_entropy({rec.a.row_ptr(r), static_cast<std::size_t>(n)});
      auto& slot = acc[rec.layer];
      slot.first += h;
      slot.second += 1;
    }
  }
  EntropyProfile profile;
  profile.excludes = excludes;
  profile.model_tag = std::move(model_tag);
  for (const auto& [layer, slot] : acc) profile.per_layer.push_back(slot.first / slot.second);
  const int drop = std::min<int>(excludes.last_layers, static_cast<int>(profile.per_layer.size()));
  if (drop > 0) profile.per_layer.resize(profile.per_layer.size() - static_cast<std::size_t>(drop));
  return profile;
}

Tensor<double> softmax_jacobian(std::span<const double> a, double lambda) {
  check_distribution(a);
  if (!(lambda > 0.0)) throw std::invalid_argument("softmax_jacobian: lambda must be positive");
  const int n = static_cast<int>(a.size());
  Tensor<double> j({n, n});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      j.at(r, c) = lambda * ((r == c ? a[r] : 0.0) - a[r] * a[c]);
  return j;
}

double nuclear_norm_analytic(std::span<const double> a, double lambda) {
  check_distribution(a);
  if (!(lambda > 0.0)) throw std::invalid_argument("nuclear_norm_analytic: lambda must be positive");
  double acc = 0.0;
  for (double v : a) acc += v - v * v;
  return lambda * acc;
}

MaximalityReport verify_uniform_maximality(int n, double lambda, long trials, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("verify_uniform_maximality: need n >= 2");
  if (trials < 1) throw std::invalid_argument("verify_uniform_maximality: need trials >= 1");
  MaximalityReport report;
  report.bound = lambda * (1.0 - 1.0 / n);

  std::vector<double> probe(static_cast<std::size_t>(n));
  auto consider = [&](const std::vector<double>& a) {
    const double v = nuclear_norm_analytic(a, lambda);
    ++report.checked;
    if (v > report.max_found || report.checked == 1) {
      report.max_found = v;
      report.argmax = a;
    }
  };

  // vertices and edge midpoints of the simplex
  for (int i = 0; i < n; ++i) {
    std::fill(probe.begin(), probe.end(), 0.0);
    probe[static_cast<std::size_t>(i)] = 1.0;
    consider(probe);
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      std::fill(probe.begin(), probe.end(), 0.0);
      probe[static_cast<std::size_t>(i)] = 0.5;
      probe[static_cast<std::size_t>(j)] = 0.5;
      consider(probe);
    }

  // uniform sampling of the simplex via normalized exponentials
  Rng rng(seed == 0 ? 0x9e3779b97f4a7c15ull ^ static_cast<std::uint64_t>(n) : seed);
  for (long t = 0; t < trials; ++t) {
    double sum = 0.0;
    for (double& v : probe) {
      v = -std::log(rng.uniform_pos());
      sum += v;
    }
    for (double& v : probe) v /= sum;
    consider(probe);
  }

  std::vector<double> uniform(static_cast<std::size_t>(n), 1.0 / n);
  report.uniform_gap = std::abs(report.bound - nuclear_norm_analytic(uniform, lambda));
  report.margin = report.bound - report.max_found;
  report.violated = report.max_found > report.bound + 1e-12;
  return report;
}

double relative_distance(const Tensor<double>& a, const TokenPositions& positions,
                         bool renormalize) {
  const int ns = positions.p.extent(0);
  if (a.ndim() != 2 || a.extent(0) != a.extent(1))
    throw std::invalid_argument("relative_distance: attention must be square");
  const int an = a.extent(0);
  int offset;
  if (an == ns)
    offset = 0;  // spatial-only attention
  else if (an == ns + 1)
    offset = 1;  // class token at row/col 0
  else
    throw std::invalid_argument("relative_distance: attention size does not match the grid");
  if (ns < 2) return 0.0;

  auto l1 = [&](int i, int j) {
    return std::abs(positions.p.at(i, 0) - positions.p.at(j, 0)) +
           std::abs(positions.p.at(i, 1) - positions.p.at(j, 1));
  };

  if (!renormalize) {
    double acc = 0.0;
    for (int i = 0; i < ns; ++i)
      for (int j = 0; j < ns; ++j) {
        if (i == j) continue;
        acc += a.at(i + offset, j + offset) * l1(i, j);
      }
    return acc / (static_cast<double>(ns) * (ns - 1));
  }

  double acc = 0.0;
  int counted = 0;
  for (int i = 0; i < ns; ++i) {
    double denom = 0.0;
    for (int j = 0; j < ns; ++j)
      if (j != i) denom += a.at(i + offset, j + offset);
    if (denom <= 0.0) continue;
    double row = 0.0;
    for (int j = 0; j < ns; ++j)
      if (j != i) row += a.at(i + offset, j + offset) * l1(i, j);
    acc += row / denom;
    ++counted;
  }
  return counted > 0 ? acc / counted : 0.0;
}

double abs_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty vector");
  for (double& v : values) v = std::abs(v);
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<ScalingStats> scaling_stats(
    const std::vector<std::pair<int, std::vector<double>>>& lambda_vecs) {
  std::vector<ScalingStats> out;
  out.reserve(lambda_vecs.size());
  for (const auto& [layer, lam] : lambda_vecs) {
    if (lam.empty()) throw std::invalid_argument("scaling_stats: empty scaling vector");
    ScalingStats s;
    s.layer = layer;
    const double q10 = abs_quantile(lam, 0.10);
    const double q90 = abs_quantile(lam, 0.90);
    if (q90 != 0.0) s.ratio = q10 / q90;
    double mean = 0.0;
    for (double v : lam) mean += v;
    s.mean = mean / static_cast<double>(lam.size());
    out.push_back(s);
  }
  return out;
}

}  // namespace cbvit
