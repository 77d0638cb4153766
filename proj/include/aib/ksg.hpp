#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "aib/rng.hpp"

namespace aib {

/// Digamma via the recurrence psi(x) = psi(x+1) - 1/x and the asymptotic
/// series for large arguments.
inline double digamma(double x) {
  if (x <= 0) throw std::invalid_argument("digamma: x must be positive");
  double r = 0;
  while (x < 6.0) {
    r -= 1.0 / x;
    x += 1.0;
  }
  double inv = 1.0 / x, inv2 = inv * inv;
  r += std::log(x) - 0.5 * inv -
       inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return r;
}

/// KSG mutual information estimator (Kraskov et al., estimator 1) in nats.
/// L2 metric within each marginal space, max over the two marginal distances
/// in the joint space. All coordinates receive 1e-10 jitter before the
/// neighbor search so discrete values have unique ranks. Clamped at 0.
/// O(N^2); intended for the 5000-sample diagnostic scale.
inline double ksg_mi(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                     int k = 3, std::uint64_t jitter_seed = 0) {
  const Eigen::Index N = X.rows();
  if (Y.rows() != N) throw std::invalid_argument("ksg_mi: row mismatch");
  if (N <= k) throw std::invalid_argument("ksg_mi: need more than k samples");

  Eigen::MatrixXd Xj = X, Yj = Y;
  Rng rng = Rng(jitter_seed).child(tag("ksg_jitter"));
  for (Eigen::Index i = 0; i < Xj.size(); ++i)
    Xj.data()[i] += 1e-10 * rng.normal();
  for (Eigen::Index i = 0; i < Yj.size(); ++i)
    Yj.data()[i] += 1e-10 * rng.normal();

  // degenerate: everything identical even after jitter scale considerations
  if ((X.rowwise() - X.row(0)).cwiseAbs().maxCoeff() == 0.0 ||
      (Y.rowwise() - Y.row(0)).cwiseAbs().maxCoeff() == 0.0)
    return 0.0;

  std::vector<double> dx(static_cast<std::size_t>(N)),
      dy(static_cast<std::size_t>(N)), dj(static_cast<std::size_t>(N));
  double acc = 0;
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < N; ++j) {
      dx[static_cast<std::size_t>(j)] = (Xj.row(j) - Xj.row(i)).norm();
      dy[static_cast<std::size_t>(j)] = (Yj.row(j) - Yj.row(i)).norm();
      dj[static_cast<std::size_t>(j)] =
          std::max(dx[static_cast<std::size_t>(j)],
                   dy[static_cast<std::size_t>(j)]);
    }
    std::vector<double> joint = dj;
    // self distance is 0; k-th neighbor is at sorted index k
    std::nth_element(joint.begin(), joint.begin() + k, joint.end());
    double eps = joint[static_cast<std::size_t>(k)];
    int nx = 0, ny = 0;
    for (Eigen::Index j = 0; j < N; ++j) {
      if (j == i) continue;
      if (dx[static_cast<std::size_t>(j)] < eps) ++nx;
      if (dy[static_cast<std::size_t>(j)] < eps) ++ny;
    }
    acc += digamma(nx + 1.0) + digamma(ny + 1.0);
  }
  double mi = digamma(static_cast<double>(k)) +
              digamma(static_cast<double>(N)) -
              acc / static_cast<double>(N);
  return std::max(mi, 0.0);
}

/// I(Z; U | S) for binary S: sum over classes of P(S=s) * MI(Z|s, U|s).
/// Classes with <= k samples are skipped (their weight is dropped).
inline double conditional_mi(const Eigen::MatrixXd& Z,
                             const Eigen::MatrixXd& U,
                             const std::vector<int>& S, int k = 3,
                             std::uint64_t jitter_seed = 0) {
  const Eigen::Index N = Z.rows();
  if (U.rows() != N || static_cast<Eigen::Index>(S.size()) != N)
    throw std::invalid_argument("conditional_mi: row mismatch");
  std::vector<int> classes;
  for (int s : S)
    if (std::find(classes.begin(), classes.end(), s) == classes.end())
      classes.push_back(s);
  if (classes.size() < 2)
    throw std::invalid_argument("conditional_mi: need both classes present");
  double out = 0;
  for (int c : classes) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < N; ++i)
      if (S[static_cast<std::size_t>(i)] == c) rows.push_back(i);
    if (static_cast<int>(rows.size()) <= k) continue;
    Eigen::MatrixXd Zc(rows.size(), Z.cols()), Uc(rows.size(), U.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Zc.row(static_cast<Eigen::Index>(r)) = Z.row(rows[r]);
      Uc.row(static_cast<Eigen::Index>(r)) = U.row(rows[r]);
    }
    double w = static_cast<double>(rows.size()) / static_cast<double>(N);
    out += w * ksg_mi(Zc, Uc, k, jitter_seed + static_cast<std::uint64_t>(c + 7));
  }
  return out;
}

}  // namespace aib
