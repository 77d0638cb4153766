#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "aib/rng.hpp"
#include "aib/tape.hpp"

namespace aib {

/// Named view over a set of Params, used by the optimizer and checkpoints.
template <class S>
struct ParamGroup {
  std::vector<std::pair<std::string, Param<S>*>> items;

  void add(const std::string& name, Param<S>& p) { items.push_back({name, &p}); }
  void add(const ParamGroup& g, const std::string& prefix) {
    for (auto& [n, p] : g.items) items.push_back({prefix + "." + n, p});
  }
  void zero_grad() {
    for (auto& [n, p] : items) p->grad.setZero();
  }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto& [n, p] : items) c += p->value.size();
    return c;
  }
};

/// Adam with bias correction; one instance per optimizer (own step counter).
template <class S>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamGroup<S>& g) {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& [n, p] : g.items) {
      p->adam_m = S(b1_) * p->adam_m + S(1.0 - b1_) * p->grad;
      p->adam_v =
          (S(b2_) * p->adam_v.array() +
           S(1.0 - b2_) * p->grad.array().square())
              .matrix();
      p->value.array() -= S(lr_ / bc1) * p->adam_m.array() /
                          ((p->adam_v.array() / S(bc2)).sqrt() + S(eps_));
      p->grad.setZero();
    }
  }

  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  double lr() const { return lr_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

/// Fully connected layer; weights stored (out x in) so fwd is x * W^T + b.
template <class S>
struct Linear {
  Param<S> W;  // out x in
  Param<S> b;  // 1 x out

  void init(Eigen::Index in, Eigen::Index out, Rng rng) {
    W.init(out, in);
    b.init(1, out);
    double k = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < out; ++i)
      for (Eigen::Index j = 0; j < in; ++j)
        W.value(i, j) = static_cast<S>(rng.uniform(-k, k));
    for (Eigen::Index i = 0; i < out; ++i)
      b.value(0, i) = static_cast<S>(rng.uniform(-k, k));
  }

  void zero_weights() {
    W.value.setZero();
    b.value.setZero();
  }

  Var<S> fwd(Tape<S>& t, Var<S> x, bool trainable = true) const {
    auto& self = const_cast<Linear&>(*this);
    Var<S> w = t.leaf(self.W, trainable);
    Var<S> bias = t.leaf(self.b, trainable);
    return add_rowvec(t, matmul_bt(t, x, w), bias);
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    g.add(prefix + ".W", W);
    g.add(prefix + ".b", b);
  }
};

/// MLP with ReLU between layers; no activation after the last layer.
template <class S>
struct Mlp {
  std::vector<Linear<S>> layers;

  void init(const std::vector<Eigen::Index>& dims, Rng rng) {
    layers.resize(dims.size() - 1);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers[i].init(dims[i], dims[i + 1],
                     rng.child(tag("layer") + static_cast<std::uint64_t>(i)));
  }

  Var<S> fwd(Tape<S>& t, Var<S> x, bool trainable = true) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].fwd(t, x, trainable);
      if (i + 1 < layers.size()) x = relu(t, x);
    }
    return x;
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    for (std::size_t i = 0; i < layers.size(); ++i)
      layers[i].register_params(g, prefix + ".l" + std::to_string(i));
  }
};

/// Single-layer LSTM cell. Gate order in the packed weights: i, f, g, o.
template <class S>
struct LstmCell {
  Eigen::Index hidden = 0;
  Param<S> Wx;  // 4H x in
  Param<S> Wh;  // 4H x H
  Param<S> b;   // 1 x 4H

  void init(Eigen::Index in, Eigen::Index H, Rng rng) {
    hidden = H;
    Wx.init(4 * H, in);
    Wh.init(4 * H, H);
    b.init(1, 4 * H);
    double k = 1.0 / std::sqrt(static_cast<double>(H));
    Rng r1 = rng.child(tag("wx")), r2 = rng.child(tag("wh")),
        r3 = rng.child(tag("b"));
    for (Eigen::Index i = 0; i < Wx.value.rows(); ++i)
      for (Eigen::Index j = 0; j < Wx.value.cols(); ++j)
        Wx.value(i, j) = static_cast<S>(r1.uniform(-k, k));
    for (Eigen::Index i = 0; i < Wh.value.rows(); ++i)
      for (Eigen::Index j = 0; j < Wh.value.cols(); ++j)
        Wh.value(i, j) = static_cast<S>(r2.uniform(-k, k));
    for (Eigen::Index i = 0; i < b.value.cols(); ++i)
      b.value(0, i) = static_cast<S>(r3.uniform(-k, k));
  }

  struct State {
    Var<S> h, c;
  };

  State zero_state(Tape<S>& t, Eigen::Index batch) const {
    return {t.constant(Mat<S>::Zero(batch, hidden)),
            t.constant(Mat<S>::Zero(batch, hidden))};
  }

  State step(Tape<S>& t, Var<S> x, State st, bool trainable = true) const {
    auto& self = const_cast<LstmCell&>(*this);
    Var<S> wx = t.leaf(self.Wx, trainable);
    Var<S> wh = t.leaf(self.Wh, trainable);
    Var<S> bias = t.leaf(self.b, trainable);
    Var<S> z = add_rowvec(
        t, add(t, matmul_bt(t, x, wx), matmul_bt(t, st.h, wh)), bias);
    Eigen::Index H = hidden;
    Var<S> i = sigmoid(t, slice_cols(t, z, 0, H));
    Var<S> f = sigmoid(t, slice_cols(t, z, H, H));
    Var<S> g = tanh_(t, slice_cols(t, z, 2 * H, H));
    Var<S> o = sigmoid(t, slice_cols(t, z, 3 * H, H));
    Var<S> c = add(t, cmul(t, f, st.c), cmul(t, i, g));
    Var<S> h = cmul(t, o, tanh_(t, c));
    return {h, c};
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    g.add(prefix + ".Wx", Wx);
    g.add(prefix + ".Wh", Wh);
    g.add(prefix + ".b", b);
  }
};

}  // namespace aib
