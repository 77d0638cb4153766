#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "aib/nn.hpp"
#include "aib/rng.hpp"

namespace aib {

struct GradCheckResult {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int probes = 0;
};

/// Compares analytic gradients against central finite differences at random
/// parameter coordinates. `loss` must zero nothing itself: it builds a fresh
/// tape from the current parameter values, runs backward, and returns the
/// scalar loss. Use Scalar = double; float32 cannot resolve the differences.
inline GradCheckResult grad_check(ParamGroup<double>& params,
                                  const std::function<double()>& loss,
                                  int n_probes, Rng rng, double h = 1e-5) {
  GradCheckResult res;
  params.zero_grad();
  loss();
  // Snapshot analytic grads, then probe coordinates one at a time.
  std::vector<Mat<double>> saved;
  saved.reserve(params.items.size());
  for (auto& [n, p] : params.items) saved.push_back(p->grad);

  for (int k = 0; k < n_probes; ++k) {
    std::size_t pi = rng.uniform_index(params.items.size());
    auto* p = params.items[pi].second;
    if (p->value.size() == 0) {
      --k;
      continue;
    }
    Eigen::Index ei =
        static_cast<Eigen::Index>(rng.uniform_index(p->value.size()));
    double x0 = p->value.data()[ei];
    double analytic = saved[pi].data()[ei];

    p->value.data()[ei] = x0 + h;
    params.zero_grad();
    double lp = loss();
    p->value.data()[ei] = x0 - h;
    params.zero_grad();
    double lm = loss();
    p->value.data()[ei] = x0;

    double numeric = (lp - lm) / (2.0 * h);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    double rel = std::abs(analytic - numeric) / denom;
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_analytic = analytic;
      res.worst_numeric = numeric;
    }
    ++res.probes;
  }
  params.zero_grad();
  return res;
}

}  // namespace aib
