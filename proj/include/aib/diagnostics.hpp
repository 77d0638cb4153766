#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "aib/ksg.hpp"

namespace aib {

/// Variability: tr(Cov(Z)) / d_z with the unbiased sample covariance.
/// (The decomposition below uses the biased 1/n convention internally so its
/// identity is exact; this standalone value is the one reported in tables.)
inline double variability(const Eigen::MatrixXd& Z) {
  const Eigen::Index n = Z.rows(), d = Z.cols();
  if (n < 2) throw std::invalid_argument("variability: need >= 2 rows");
  Eigen::RowVectorXd mu = Z.colwise().mean();
  double tr = (Z.rowwise() - mu).squaredNorm() / static_cast<double>(n - 1);
  return tr / static_cast<double>(d);
}

struct DecompositionResult {
  double variability = 0;  // biased total, equals the sum of the terms
  double term1 = 0;        // within-(S,U)-cell noise
  double term2 = 0;        // within-mode spread of cell means over U
  double term3 = 0;        // between-mode separation
};

struct EmbeddingRow {
  Eigen::VectorXd z;
  int s = 0;     // binary mode label, +1 / -1
  int cell = 0;  // identifies the (S, U) cell (one sampled context)
};

/// Theorem-style variance decomposition over (S, U) cells. All moments are
/// plug-in (1/n) so variability == term1 + term2 + term3 exactly.
inline DecompositionResult variance_decomposition(
    const std::vector<EmbeddingRow>& rows) {
  if (rows.size() < 2)
    throw std::invalid_argument("variance_decomposition: need >= 2 rows");
  const Eigen::Index d = rows[0].z.size();
  const double N = static_cast<double>(rows.size());

  std::map<int, std::vector<const EmbeddingRow*>> cells;
  std::map<int, std::vector<const EmbeddingRow*>> modes;
  for (auto& r : rows) {
    if (r.z.size() != d)
      throw std::invalid_argument("variance_decomposition: ragged rows");
    cells[r.cell].push_back(&r);
    modes[r.s].push_back(&r);
  }
  if (modes.size() != 2)
    throw std::invalid_argument(
        "variance_decomposition: both modes must be present");
  for (auto& [id, cr] : cells) {
    if (cr.size() < 2)
      throw std::invalid_argument(
          "variance_decomposition: every (S,U) cell needs >= 2 samples");
    for (auto* p : cr)
      if (p->s != cr[0]->s)
        throw std::invalid_argument(
            "variance_decomposition: a cell mixes modes");
  }

  auto mean_of = [&](const std::vector<const EmbeddingRow*>& v) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
    for (auto* p : v) m += p->z;
    return Eigen::VectorXd(m / static_cast<double>(v.size()));
  };

  DecompositionResult res;

  // term1: E_{S,U}[ tr Cov(Z | S,U) ] / d
  std::map<int, Eigen::VectorXd> cell_mean;
  for (auto& [id, cr] : cells) {
    Eigen::VectorXd m = mean_of(cr);
    cell_mean[id] = m;
    double tr = 0;
    for (auto* p : cr) tr += (p->z - m).squaredNorm();
    res.term1 += tr / N;
  }
  res.term1 /= static_cast<double>(d);

  // term2: E_S[ tr Cov_{U|S}( zbar(S,U) ) ] / d
  std::map<int, Eigen::VectorXd> mode_mean;
  for (auto& [s, mr] : modes) mode_mean[s] = mean_of(mr);
  for (auto& [id, cr] : cells) {
    int s = cr[0]->s;
    double w = static_cast<double>(cr.size()) / N;
    res.term2 += w * (cell_mean[id] - mode_mean[s]).squaredNorm();
  }
  res.term2 /= static_cast<double>(d);

  // term3: p(1-p) ||mu_+ - mu_-||^2 / d
  auto it = modes.begin();
  auto& [s0, m0] = *it;
  ++it;
  auto& [s1, m1] = *it;
  double p = static_cast<double>(modes[s0].size()) / N;
  res.term3 = p * (1.0 - p) * (mode_mean[s0] - mode_mean[s1]).squaredNorm() /
              static_cast<double>(d);

  // biased total variability for the exact identity
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
  for (auto& r : rows) mu += r.z;
  mu /= N;
  double tr = 0;
  for (auto& r : rows) tr += (r.z - mu).squaredNorm();
  res.variability = tr / (N * static_cast<double>(d));
  return res;
}

/// Representation-Overlap: mean cosine similarity over all n^2 ordered pairs
/// of per-context mean embeddings, including i = j. Zero-norm means are
/// excluded (n shrinks); at least one nonzero mean is required.
inline double representation_overlap(
    const std::vector<Eigen::VectorXd>& means, int* excluded = nullptr) {
  std::vector<const Eigen::VectorXd*> ok;
  for (auto& m : means)
    if (m.norm() > 0) ok.push_back(&m);
  if (excluded) *excluded = static_cast<int>(means.size() - ok.size());
  if (ok.empty())
    throw std::invalid_argument("representation_overlap: all means are zero");
  double s = 0;
  for (auto* a : ok)
    for (auto* b : ok) s += a->dot(*b) / (a->norm() * b->norm());
  return s / static_cast<double>(ok.size() * ok.size());
}

struct PgProbeReport {
  double trace_cov_g = 0;
  double variability_z = 0;
  double bound = 0;  // V0 + Lm^2 * d_z * Variability(Z)
  double v0 = 0, lm = 0;
  bool holds = false;
};

/// Checks the policy-gradient variance bound on synthetic (Z, G) samples with
/// generator-known constants V0 (conditional noise floor) and Lm (Lipschitz
/// constant of the conditional mean). `slack` absorbs sampling error.
inline PgProbeReport pg_variance_probe(const Eigen::MatrixXd& Z,
                                       const Eigen::MatrixXd& G, double v0,
                                       double lm, double slack = 0.05) {
  PgProbeReport r;
  r.v0 = v0;
  r.lm = lm;
  const Eigen::Index n = G.rows();
  if (n < 2 || Z.rows() != n)
    throw std::invalid_argument("pg_variance_probe: bad sample shapes");
  Eigen::RowVectorXd mg = G.colwise().mean();
  r.trace_cov_g =
      (G.rowwise() - mg).squaredNorm() / static_cast<double>(n - 1);
  r.variability_z = variability(Z);
  r.bound = v0 + lm * lm * static_cast<double>(Z.cols()) * r.variability_z;
  r.holds = r.trace_cov_g <= r.bound + slack * (1.0 + r.bound);
  return r;
}

}  // namespace aib
