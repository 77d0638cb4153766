#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "aib/rng.hpp"

namespace aib {

/// Averaged episodic return over a context set: plain mean of the per-context
/// mean returns.
inline double aer(const std::vector<double>& per_context_means) {
  if (per_context_means.empty())
    throw std::invalid_argument("aer: empty input");
  double s = 0;
  for (double v : per_context_means) s += v;
  return s / static_cast<double>(per_context_means.size());
}

/// Min-max score normalization with clipping into [0, 1].
inline double normalize_score(double value, double lo, double hi) {
  if (hi <= lo) throw std::invalid_argument("normalize_score: hi <= lo");
  return std::clamp((value - lo) / (hi - lo), 0.0, 1.0);
}

/// Interquartile mean: drop floor(n/4) values from each end of the sorted
/// list, mean of the rest.
inline double iqm(std::vector<double> v) {
  if (v.size() < 2) throw std::invalid_argument("iqm: need >= 2 scores");
  std::sort(v.begin(), v.end());
  std::size_t drop = v.size() / 4;
  double s = 0;
  for (std::size_t i = drop; i < v.size() - drop; ++i) s += v[i];
  return s / static_cast<double>(v.size() - 2 * drop);
}

namespace detail {
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  double pos = q * static_cast<double>(sorted.size() - 1);
  std::size_t i = static_cast<std::size_t>(pos);
  double frac = pos - static_cast<double>(i);
  if (i + 1 >= sorted.size()) return sorted.back();
  return sorted[i] * (1.0 - frac) + sorted[i + 1] * frac;
}
}  // namespace detail

struct IqmResult {
  double iqm = 0, ci_lo = 0, ci_hi = 0;
};

/// IQM with a 95% percentile-bootstrap confidence interval.
inline IqmResult iqm_ci(const std::vector<double>& scores, int n_boot = 2000,
                        std::uint64_t seed = 0) {
  IqmResult r;
  r.iqm = iqm(scores);
  Rng rng = Rng(seed).child(tag("iqm_boot"));
  std::vector<double> stats(static_cast<std::size_t>(n_boot));
  std::vector<double> resample(scores.size());
  for (int b = 0; b < n_boot; ++b) {
    for (auto& x : resample)
      x = scores[rng.uniform_index(scores.size())];
    stats[static_cast<std::size_t>(b)] = iqm(resample);
  }
  std::sort(stats.begin(), stats.end());
  r.ci_lo = detail::quantile_sorted(stats, 0.025);
  r.ci_hi = detail::quantile_sorted(stats, 0.975);
  return r;
}

/// Mann-Whitney probability of improvement: mean over all (a, b) pairs of
/// 1[a > b] + 0.5 * 1[a = b].
inline double poi_stat(const std::vector<double>& a,
                       const std::vector<double>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("probability_of_improvement: empty input");
  double s = 0;
  for (double x : a)
    for (double y : b) s += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return s / static_cast<double>(a.size() * b.size());
}

struct PoiResult {
  double poi = 0, ci_lo = 0, ci_hi = 0;
};

inline PoiResult probability_of_improvement(const std::vector<double>& a,
                                            const std::vector<double>& b,
                                            int n_boot = 2000,
                                            std::uint64_t seed = 0) {
  PoiResult r;
  r.poi = poi_stat(a, b);
  Rng rng = Rng(seed).child(tag("poi_boot"));
  std::vector<double> stats(static_cast<std::size_t>(n_boot));
  std::vector<double> ra(a.size()), rb(b.size());
  for (int k = 0; k < n_boot; ++k) {
    for (auto& x : ra) x = a[rng.uniform_index(a.size())];
    for (auto& x : rb) x = b[rng.uniform_index(b.size())];
    stats[static_cast<std::size_t>(k)] = poi_stat(ra, rb);
  }
  std::sort(stats.begin(), stats.end());
  r.ci_lo = detail::quantile_sorted(stats, 0.025);
  r.ci_hi = detail::quantile_sorted(stats, 0.975);
  return r;
}

}  // namespace aib
