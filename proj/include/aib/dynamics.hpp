#pragma once

#include "aib/hyper.hpp"
#include "aib/nn.hpp"
#include "aib/tape.hpp"

namespace aib {

enum class CondMode { NONE, CONCAT_Z, ADAPTER };

/// Forward dynamics model predicting the state delta. Conditioning:
///   CONCAT_Z — z is concatenated to (s, a) at the input (DMA/DMA*);
///   ADAPTER  — omega modulates the trunk output (DMA*-SH / DMA*-H);
///   NONE     — unconditioned.
template <class S>
struct DynamicsModel {
  CondMode mode = CondMode::NONE;
  Mlp<S> trunk;
  Linear<S> head;

  void init(int state_dim, int action_dim, int d_z, CondMode m, Rng rng) {
    mode = m;
    int in = state_dim + action_dim + (m == CondMode::CONCAT_Z ? d_z : 0);
    trunk.init({in, kTrunkDim, kTrunkDim}, rng.child(tag("dyn_trunk")));
    head.init(kTrunkDim, state_dim, rng.child(tag("dyn_head")));
  }

  /// x = concat(s, a [, z]); omega required iff mode == ADAPTER.
  Var<S> predict_delta(Tape<S>& t, Var<S> x, const Var<S>* omega,
                       bool trainable = true) const {
    if ((mode == CondMode::ADAPTER) != (omega != nullptr))
      throw std::invalid_argument(
          "dynamics conditioning mode does not match the supplied omega");
    Var<S> h = trunk_features(t, trunk, x, omega, trainable);
    return head.fwd(t, h, trainable);
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    trunk.register_params(g, prefix + ".trunk");
    head.register_params(g, prefix + ".head");
  }
};

/// Mean over the batch of the squared L2 norm of the prediction error.
template <class S>
Var<S> dynamics_loss(Tape<S>& t, Var<S> pred, Var<S> target) {
  Var<S> err = sub(t, pred, target);
  return mean_all(t, row_sum(t, square(t, err)));
}

}  // namespace aib
