#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "aib/envs.hpp"
#include "aib/nn.hpp"
#include "aib/rng.hpp"
#include "aib/tape.hpp"

namespace aib {

/// Plain (non-tape) AvgL1Norm for callers outside the training graph:
/// y = N * x / (sum_i |x_i| + eps).
inline Vec avg_l1_norm(const Vec& x, double eps = 1e-8) {
  double d = x.lpNorm<1>() + eps;
  return x * (static_cast<double>(x.size()) / d);
}

/// Plain group-wise softmax (temperature 1) over L groups of V entries.
inline Vec sim_norm(const Vec& v, int L, int V) {
  if (v.size() != static_cast<Eigen::Index>(L) * V)
    throw std::invalid_argument("sim_norm: dimension mismatch");
  Vec out(v.size());
  for (int g = 0; g < L; ++g) {
    auto seg = v.segment(g * V, V);
    Eigen::ArrayXd e = (seg.array() - seg.maxCoeff()).exp();
    out.segment(g * V, V) = (e / e.sum()).matrix();
  }
  return out;
}

struct WindowEntry {
  Vec s, a, delta;
};

/// Sliding buffer of the last K (s, a, delta s) tuples from one context.
/// Conceptually always K entries: positions before the first real transition
/// are zero. Persists across episodes of one training context; reset() when
/// the context changes.
class TransitionWindow {
 public:
  explicit TransitionWindow(int K = 24) : K_(K) {}

  void push(Vec s, Vec a, Vec delta) {
    entries_.push_back({std::move(s), std::move(a), std::move(delta)});
    if (entries_.size() > static_cast<std::size_t>(K_))
      entries_.erase(entries_.begin());
  }
  void reset() { entries_.clear(); }

  int K() const { return K_; }
  int filled() const { return static_cast<int>(entries_.size()); }

  /// Entry at conceptual slot i in [0, K): zero-padded before fill.
  /// Slot K-1 is the most recent transition.
  WindowEntry slot(int i, int state_dim, int action_dim) const {
    int pad = K_ - filled();
    if (i < pad) {
      return {Vec::Zero(state_dim), Vec::Zero(action_dim),
              Vec::Zero(state_dim)};
    }
    return entries_[static_cast<std::size_t>(i - pad)];
  }

 private:
  int K_;
  std::vector<WindowEntry> entries_;
};

struct EncoderConfig {
  int K = 24;
  int state_dim = 0;
  int action_dim = 0;
  int model_dim = 32;
  int L = 2;
  int V = 4;
  double subsample_frac = 0.2;
  double mask_ratio = 0.0;   // applied only when training=true
  bool use_norms = true;     // AvgL1Norm + SimNorm (off for the plain variant)

  int d_z() const { return L * V; }
  int input_dim() const { return 2 * state_dim + action_dim; }
  int n_subsample() const {
    return static_cast<int>(std::ceil(subsample_frac * K));
  }
};

/// DMA* context encoder: subsample -> shuffle -> mask -> linear -> AvgL1Norm
/// -> LSTM -> projection -> SimNorm.
template <class S>
struct Encoder {
  EncoderConfig cfg;
  Linear<S> input;
  LstmCell<S> lstm;
  Linear<S> proj;

  void init(const EncoderConfig& c, Rng rng) {
    cfg = c;
    input.init(cfg.input_dim(), cfg.model_dim, rng.child(tag("enc_in")));
    lstm.init(cfg.model_dim, cfg.model_dim, rng.child(tag("enc_lstm")));
    proj.init(cfg.model_dim, cfg.d_z(), rng.child(tag("enc_proj")));
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    input.register_params(g, prefix + ".input");
    lstm.register_params(g, prefix + ".lstm");
    proj.register_params(g, prefix + ".proj");
  }

  /// Encodes a batch of windows into a (batch x d_z) embedding node.
  /// Subsampling and shuffling always consume `rng`; the mask stream is
  /// consulted only when training=true.
  Var<S> encode(Tape<S>& t, const std::vector<const TransitionWindow*>& ws,
                Rng& rng, bool training, bool trainable = true) const {
    const int N = static_cast<int>(ws.size());
    const int M = cfg.n_subsample();
    const int D = cfg.input_dim();

    // Per window: pick M of the K slots without replacement in random order
    // (partial Fisher-Yates), then decide per-field masking.
    std::vector<Mat<S>> steps(static_cast<std::size_t>(M));
    for (auto& m : steps) m.setZero(N, D);
    std::vector<int> idx(static_cast<std::size_t>(cfg.K));
    for (int w = 0; w < N; ++w) {
      for (int i = 0; i < cfg.K; ++i) idx[static_cast<std::size_t>(i)] = i;
      for (int j = 0; j < M; ++j) {
        int r = j + static_cast<int>(
                        rng.uniform_index(static_cast<std::uint64_t>(
                            cfg.K - j)));
        std::swap(idx[static_cast<std::size_t>(j)],
                  idx[static_cast<std::size_t>(r)]);
      }
      for (int j = 0; j < M; ++j) {
        WindowEntry e = ws[static_cast<std::size_t>(w)]->slot(
            idx[static_cast<std::size_t>(j)], cfg.state_dim, cfg.action_dim);
        if (training && cfg.mask_ratio > 0) {
          if (rng.uniform() < cfg.mask_ratio) e.s.setZero();
          if (rng.uniform() < cfg.mask_ratio) e.a.setZero();
          if (rng.uniform() < cfg.mask_ratio) e.delta.setZero();
        }
        auto& row = steps[static_cast<std::size_t>(j)];
        for (int i = 0; i < cfg.state_dim; ++i)
          row(w, i) = static_cast<S>(e.s(i));
        for (int i = 0; i < cfg.action_dim; ++i)
          row(w, cfg.state_dim + i) = static_cast<S>(e.a(i));
        for (int i = 0; i < cfg.state_dim; ++i)
          row(w, cfg.state_dim + cfg.action_dim + i) =
              static_cast<S>(e.delta(i));
      }
    }

    auto st = lstm.zero_state(t, N);
    for (int j = 0; j < M; ++j) {
      Var<S> x = input.fwd(t, t.constant(steps[static_cast<std::size_t>(j)]),
                           trainable);
      if (cfg.use_norms) x = avg_l1_norm_rows(t, x, S(1e-8));
      st = lstm.step(t, x, st, trainable);
    }
    Var<S> logits = proj.fwd(t, st.h, trainable);
    return cfg.use_norms ? softmax_groups(t, logits, cfg.V) : logits;
  }

  /// Forward-only single-window embedding as a plain vector.
  Vec encode_one(const TransitionWindow& w, Rng& rng, bool training) const {
    Tape<S> t;
    auto& self = const_cast<Encoder&>(*this);
    Var<S> z = self.encode(t, {&w}, rng, training, false);
    Vec out(cfg.d_z());
    for (int i = 0; i < cfg.d_z(); ++i)
      out(i) = static_cast<double>(t.val(z)(0, i));
    return out;
  }
};

}  // namespace aib
