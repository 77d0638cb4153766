#pragma once

#include <cmath>

#include "aib/nn.hpp"
#include "aib/tape.hpp"

namespace aib {

constexpr int kTrunkDim = 256;
constexpr int kBottleneck = 32;
constexpr int kAdapterWeights = 2 * kTrunkDim * kBottleneck;  // 16384

/// Hypernetwork h_eta: context embedding -> flat adapter weights omega.
/// The final layer weights are zero-initialized so every adapted network
/// starts identical to its base network. A fully zero omega would be a saddle
/// (each adapter factor's gradient is multiplied by the other, zero, factor),
/// so the bias entries of the W_down block get small random values: W_up = 0
/// keeps the exact identity while letting gradient reach the W_up block.
template <class S>
struct Hypernet {
  Mlp<S> mlp;

  void init(int d_z, Rng rng) {
    mlp.init({d_z, 64, 64, kAdapterWeights}, rng);
    Linear<S>& last = mlp.layers.back();
    last.zero_weights();
    Rng br = rng.child(tag("wdown_bias"));
    const double k = 1.0 / std::sqrt(static_cast<double>(kTrunkDim));
    for (int i = 0; i < kBottleneck * kTrunkDim; ++i)
      last.b.value(0, i) = static_cast<S>(br.uniform(-k, k));
  }

  /// (batch x d_z) -> (batch x 16384). Training uses batch 1 (one omega per
  /// context).
  Var<S> generate(Tape<S>& t, Var<S> z, bool trainable = true) const {
    return mlp.fwd(t, z, trainable);
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    mlp.register_params(g, prefix + ".mlp");
  }
};

/// Plain-Eigen adapter application for oracles and forward-only callers:
/// x_tilde = x + W_up * relu(W_down * x), omega = flat [W_down; W_up]
/// row-major, x a single feature vector.
template <class S>
Eigen::Vector<S, Eigen::Dynamic> apply_adapter(
    const Eigen::Vector<S, Eigen::Dynamic>& x,
    const Eigen::Vector<S, Eigen::Dynamic>& omega, int n = kTrunkDim,
    int m = kBottleneck) {
  if (x.size() != n || omega.size() != 2 * n * m)
    throw std::invalid_argument("apply_adapter: shape mismatch");
  using RM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RM> Wd(omega.data(), m, n);
  Eigen::Map<const RM> Wu(omega.data() + m * n, n, m);
  return x + Wu * (Wd * x).cwiseMax(S(0));
}

/// Shared trunk pattern for actor/critic/dynamics: a linear-ending MLP,
/// optionally an adapter on the trunk output, then ReLU. Without an adapter
/// this is the standard (256, 256) ReLU trunk.
template <class S>
Var<S> trunk_features(Tape<S>& t, const Mlp<S>& trunk, Var<S> x,
                      const Var<S>* omega, bool trainable = true) {
  Var<S> h = trunk.fwd(t, x, trainable);
  if (omega) h = adapter_apply(t, h, *omega, kTrunkDim, kBottleneck);
  return relu(t, h);
}

/// Constructive bilinear witness: with features x(s) = [relu(s), relu(-s)],
/// hyperweights omega = [z - 1, -(z + 1)] scaling each feature through the
/// skip connection, and readout w = [1, 1], the adapted output equals s * z
/// via relu(s) - relu(-s) = s.
inline double bilinear_witness(double s, double z) {
  double x0 = std::max(s, 0.0), x1 = std::max(-s, 0.0);
  double w0 = z - 1.0, w1 = -(z + 1.0);
  double xt0 = x0 + w0 * x0;  // diagonal adapter with skip
  double xt1 = x1 + w1 * x1;
  return xt0 + xt1;
}

}  // namespace aib
