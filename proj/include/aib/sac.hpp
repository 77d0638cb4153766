#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aib/dynamics.hpp"
#include "aib/encoder.hpp"
#include "aib/envs.hpp"
#include "aib/hyper.hpp"
#include "aib/nn.hpp"
#include "aib/rng.hpp"
#include "aib/tape.hpp"

namespace aib {

enum class Variant { DR, CONCAT, DA, DMA, DMA_STAR, DMA_STAR_SH, DMA_STAR_H };

inline const char* variant_str(Variant v) {
  switch (v) {
    case Variant::DR: return "dr";
    case Variant::CONCAT: return "concat";
    case Variant::DA: return "da";
    case Variant::DMA: return "dma";
    case Variant::DMA_STAR: return "dma_star";
    case Variant::DMA_STAR_SH: return "dma_star_sh";
    case Variant::DMA_STAR_H: return "dma_star_h";
  }
  return "?";
}

inline Variant variant_parse(const std::string& s) {
  for (Variant v : {Variant::DR, Variant::CONCAT, Variant::DA, Variant::DMA,
                    Variant::DMA_STAR, Variant::DMA_STAR_SH,
                    Variant::DMA_STAR_H})
    if (s == variant_str(v)) return v;
  throw std::invalid_argument("unknown variant: " + s);
}

/// How each variant plumbs context into the networks.
struct VariantTraits {
  bool explicit_context = false;  // Concat, DA: ground-truth c is observed
  bool has_encoder = false;       // DMA family infers z from windows
  bool encoder_norms = false;     // AvgL1Norm + SimNorm (starred variants)
  double mask_ratio = 0.0;
  bool has_dynamics = false;      // DMA family trains a dynamics model
  bool adapter_rl = false;        // actor/critic conditioned through adapters
  bool adapter_dynamics = false;  // dynamics conditioned through an adapter
  bool shared_hyper = false;      // one hypernetwork for all three networks
  bool detach_cond_in_rl = false; // z (concat) or omega (adapter) detached

  static VariantTraits of(Variant v) {
    VariantTraits t;
    switch (v) {
      case Variant::DR:
        break;
      case Variant::CONCAT:
        t.explicit_context = true;
        break;
      case Variant::DA:
        t.explicit_context = true;
        t.adapter_rl = true;
        break;
      case Variant::DMA:
        t.has_encoder = true;
        t.has_dynamics = true;
        t.detach_cond_in_rl = true;
        break;
      case Variant::DMA_STAR:
        t.has_encoder = true;
        t.encoder_norms = true;
        t.mask_ratio = 0.2;
        t.has_dynamics = true;
        t.detach_cond_in_rl = true;
        break;
      case Variant::DMA_STAR_SH:
        t.has_encoder = true;
        t.encoder_norms = true;
        t.mask_ratio = 0.4;
        t.has_dynamics = true;
        t.adapter_rl = true;
        t.adapter_dynamics = true;
        t.shared_hyper = true;
        t.detach_cond_in_rl = true;
        break;
      case Variant::DMA_STAR_H:
        t.has_encoder = true;
        t.encoder_norms = true;
        t.mask_ratio = 0.4;
        t.has_dynamics = true;
        t.adapter_rl = true;
        t.adapter_dynamics = true;
        break;
    }
    return t;
  }
};

/// Raised when a loss goes non-finite; the CLI maps it to exit code 3.
struct NanAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AgentConfig {
  Variant variant = Variant::DR;
  int n_c = 8;
  std::uint64_t seed = 0;
  int K = 24;
  int batch_size = 256;  // global; split evenly across contexts
  int warmup_steps = 1000;
  int buffer_capacity = 100000;
  double gamma = 0.99;
  double tau = 0.005;
  double lr_critic = 3e-4;
  double lr_actor = 3e-4;
  double lr_alpha = 3e-4;
  double lr_dyn = 3e-4;  // encoder, dynamics model, hypernetworks
  double init_temperature = 1.0;
  double clip_grad_norm = 10;    // global-norm clip per group per step; 0 = off
  double alpha_min = 0.05;       // lower bound on the learned temperature; 0 = off
};

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;
constexpr double kLogpEps = 1e-6;

/// Squashed-Gaussian policy head over a (256, 256) trunk, optionally adapted.
template <class S>
struct GaussianActor {
  Mlp<S> trunk;
  Linear<S> mu_head, logstd_head;
  int act_dim = 0;

  void init(int in_dim, int a_dim, Rng rng) {
    act_dim = a_dim;
    trunk.init({in_dim, kTrunkDim, kTrunkDim}, rng.child(tag("actor_trunk")));
    mu_head.init(kTrunkDim, a_dim, rng.child(tag("actor_mu")));
    logstd_head.init(kTrunkDim, a_dim, rng.child(tag("actor_logstd")));
  }

  struct Out {
    Var<S> action;   // tanh(x), in (-1, 1)
    Var<S> logp;     // N x 1
    Var<S> mu_tanh;  // deterministic action
  };

  /// eps is the pre-drawn standard-normal noise (N x act_dim).
  Out fwd(Tape<S>& t, Var<S> x, const Var<S>* omega, const Mat<S>& eps,
          bool trainable = true) const {
    Var<S> h = trunk_features(t, trunk, x, omega, trainable);
    Var<S> mu = mu_head.fwd(t, h, trainable);
    Var<S> raw = logstd_head.fwd(t, h, trainable);
    // bounded log-std: min + (max - min) * (tanh(raw) + 1) / 2
    Var<S> logstd =
        affine(t, tanh_(t, raw), S(0.5 * (kLogStdMax - kLogStdMin)),
               S(kLogStdMin + 0.5 * (kLogStdMax - kLogStdMin)));
    Var<S> sigma = exp_(t, logstd);
    Var<S> xs = add(t, mu, cmul(t, sigma, t.constant(eps)));
    Var<S> a = tanh_(t, xs);
    // log N(x; mu, sigma) - log(1 - a^2 + eps) summed over action dims.
    // With x = mu + sigma * eps the Gaussian exponent is constant in the
    // parameters, so only -log sigma and the tanh correction carry gradient.
    Mat<S> base = (-S(0.5) * eps.array().square() -
                   S(0.5) * S(std::log(2.0 * std::numbers::pi)))
                      .matrix();
    Var<S> neg_corr =
        log_(t, affine(t, square(t, a), S(-1), S(1) + S(kLogpEps)));
    Var<S> per_dim = sub(t, sub(t, t.constant(base), logstd), neg_corr);
    return {a, row_sum(t, per_dim), tanh_(t, mu)};
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    trunk.register_params(g, prefix + ".trunk");
    mu_head.register_params(g, prefix + ".mu");
    logstd_head.register_params(g, prefix + ".logstd");
  }
};

template <class S>
struct QNet {
  Mlp<S> trunk;
  Linear<S> head;

  void init(int in_dim, Rng rng) {
    trunk.init({in_dim, kTrunkDim, kTrunkDim}, rng.child(tag("q_trunk")));
    head.init(kTrunkDim, 1, rng.child(tag("q_head")));
  }

  Var<S> fwd(Tape<S>& t, Var<S> sa, const Var<S>* omega,
             bool trainable = true) const {
    return head.fwd(t, trunk_features(t, trunk, sa, omega, trainable),
                    trainable);
  }

  void register_params(ParamGroup<S>& g, const std::string& prefix) {
    trunk.register_params(g, prefix + ".trunk");
    head.register_params(g, prefix + ".head");
  }
};

namespace detail {
template <class S>
inline void copy_values(ParamGroup<S>& dst, ParamGroup<S>& src) {
  if (dst.items.size() != src.items.size())
    throw std::logic_error("copy_values: group mismatch");
  for (std::size_t i = 0; i < dst.items.size(); ++i)
    dst.items[i].second->value = src.items[i].second->value;
}

template <class S>
inline void soft_update(ParamGroup<S>& target, ParamGroup<S>& online,
                        double tau) {
  if (target.items.size() != online.items.size())
    throw std::logic_error("soft_update: group mismatch");
  for (std::size_t i = 0; i < target.items.size(); ++i) {
    auto& tv = target.items[i].second->value;
    const auto& ov = online.items[i].second->value;
    tv = S(1.0 - tau) * tv + S(tau) * ov;
  }
}
}  // namespace detail

/// One stored environment step. s' = s + delta. `terminal` is true only for
/// real termination (e.g. state overflow); horizon exhaustion bootstraps.
struct ReplayStep {
  Vec s, a, delta;
  double r = 0;
  bool terminal = false;
};

/// Per-iteration scalar logs. Losses are sums over contexts.
struct IterationLog {
  long long iteration = 0;
  double critic_loss = 0, actor_loss = 0, alpha_loss = 0, dyn_loss = 0;
  double alpha = 0;
  double mean_episode_return = 0;  // mean over contexts of last finished ep
  double grad_norm_critic = 0, grad_norm_actor = 0, grad_norm_dyn = 0;
};

struct ShadowGradientReport {
  double z_lpi = 0, z_lq = 0;      // shadow gradient norms at the embedding
  double eta_lpi = 0, eta_lq = 0;  // shadow hypernetwork gradient norms
  double eta_ld = 0;               // true dynamics-loss hypernetwork norm
  double cos_ld_lpi = 0, cos_lpi_lq = 0;
};

/// The full multi-context SAC agent for one variant. Scalar S is float for
/// training and double for finite-difference checks.
template <class S>
class Agent {
 public:
  using M = Mat<S>;

  /// Per-context rollout/replay state.
  struct Worker {
    Env env;
    ContextPoint ctx;
    TransitionWindow window;
    std::vector<ReplayStep> history;
    Rng rng;
    Vec obs;
    double running_return = 0;
    std::optional<double> last_episode_return;

    Worker(const EnvSpec& spec, const ContextPoint& c, int K)
        : env(spec, c), ctx(c), window(K) {}
  };

  struct Batch {
    M s, a, r, s2, not_terminal, delta;
  };

  /// Conditioning nodes for one context inside one tape.
  struct CondNodes {
    Var<S> z;                  // encoder output or explicit-context constant
    Var<S> z_rl;               // what concat RL inputs consume (maybe detached)
    Var<S> omega;              // attached hyperweights for the dynamics model
    Var<S> omega_rl;           // shared-hyper RL weights (maybe detached)
    Var<S> omega_pi, omega_q;  // separate-hypernetwork variants
    Var<S> omega_q_frozen;     // detached omega_q for use inside the actor loss
    bool has_z = false;
    bool has_shared = false;
    bool has_sep = false;
  };

  Agent(const AgentConfig& cfg, const EnvSpec& spec,
        std::vector<ContextPoint> train_contexts)
      : cfg_(cfg),
        traits_(VariantTraits::of(cfg.variant)),
        spec_(spec),
        contexts_(std::move(train_contexts)),
        opt_actor_(cfg.lr_actor),
        opt_critic_(cfg.lr_critic),
        opt_alpha_(cfg.lr_alpha),
        opt_dyn_(cfg.lr_dyn),
        opt_hyper_pi_(cfg.lr_dyn),
        opt_hyper_q_(cfg.lr_dyn) {
    if (static_cast<int>(contexts_.size()) != cfg.n_c)
      throw std::invalid_argument("agent: context count != n_c");
    master_ = Rng(cfg.seed).child(tag("agent"));
    const int sd = spec_.state_dim(), ad = spec_.action_dim();
    if (traits_.explicit_context) cond_dim_ = spec_.context_dim();
    if (traits_.has_encoder) cond_dim_ = encoder_config().d_z();

    const int rl_extra = traits_.adapter_rl ? 0 : cond_dim_;
    actor_.init(sd + rl_extra, ad, master_.child(tag("actor")));
    q1_.init(sd + ad + rl_extra, master_.child(tag("q1")));
    q2_.init(sd + ad + rl_extra, master_.child(tag("q2")));
    q1t_.init(sd + ad + rl_extra, master_.child(tag("q1")));
    q2t_.init(sd + ad + rl_extra, master_.child(tag("q2")));

    log_alpha_.init(1, 1);
    log_alpha_.value(0, 0) = static_cast<S>(std::log(cfg.init_temperature));
    target_entropy_ = -static_cast<double>(ad);

    if (traits_.has_encoder)
      encoder_.init(encoder_config(), master_.child(tag("encoder")));
    if (traits_.has_dynamics) {
      CondMode m =
          traits_.adapter_dynamics ? CondMode::ADAPTER : CondMode::CONCAT_Z;
      dyn_.init(sd, ad, cond_dim_, m, master_.child(tag("dyn")));
    }
    if (traits_.shared_hyper) {
      hyper_shared_.init(cond_dim_, master_.child(tag("hyper")));
    } else if (traits_.adapter_rl) {
      hyper_pi_.init(cond_dim_, master_.child(tag("hyper_pi")));
      hyper_q_.init(cond_dim_, master_.child(tag("hyper_q")));
      if (traits_.adapter_dynamics)
        hyper_f_.init(cond_dim_, master_.child(tag("hyper_f")));
    }

    actor_.register_params(g_actor_, "actor");
    q1_.register_params(g_critic_, "q1");
    q2_.register_params(g_critic_, "q2");
    q1t_.register_params(g_target_, "q1");
    q2t_.register_params(g_target_, "q2");
    detail::copy_values(g_target_, g_critic_);
    g_alpha_.add("log_alpha", log_alpha_);
    if (traits_.has_encoder) encoder_.register_params(g_dyn_, "encoder");
    if (traits_.has_dynamics) dyn_.register_params(g_dyn_, "dyn");
    if (traits_.shared_hyper) hyper_shared_.register_params(g_dyn_, "hyper");
    if (traits_.adapter_rl && !traits_.shared_hyper) {
      hyper_pi_.register_params(g_hyper_pi_, "hyper_pi");
      hyper_q_.register_params(g_hyper_q_, "hyper_q");
      if (traits_.adapter_dynamics)
        hyper_f_.register_params(g_dyn_, "hyper_f");
    }

    for (int c = 0; c < cfg.n_c; ++c) {
      workers_.emplace_back(spec_, contexts_[static_cast<std::size_t>(c)],
                            cfg.K);
      Worker& w = workers_.back();
      w.rng = master_.child(tag("worker") + static_cast<std::uint64_t>(c));
      w.obs = w.env.reset(w.rng.next_u64());
    }
    enc_rng_ = master_.child(tag("enc_stream"));
    batch_rng_ = master_.child(tag("batch_stream"));
  }

  // parameter groups hold pointers into this object
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const AgentConfig& config() const { return cfg_; }
  const VariantTraits& traits() const { return traits_; }
  const EnvSpec& spec() const { return spec_; }
  const std::vector<ContextPoint>& train_contexts() const { return contexts_; }

  double alpha() const {
    return std::exp(static_cast<double>(log_alpha_.value(0, 0)));
  }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.K = cfg_.K;
    e.state_dim = spec_.state_dim();
    e.action_dim = spec_.action_dim();
    e.mask_ratio = traits_.mask_ratio;
    e.use_norms = traits_.encoder_norms;
    return e;
  }

  /// Fills every context's buffer with `warmup_steps` uniform-random steps.
  void warmup() {
    for (int i = 0; i < cfg_.warmup_steps; ++i) {
      for (Worker& w : workers_) {
        Vec a(spec_.action_dim());
        for (int j = 0; j < a.size(); ++j) a(j) = w.rng.uniform(-1.0, 1.0);
        step_worker(w, a);
      }
    }
  }

  /// One training iteration: per context collect one environment step with
  /// the live-window policy, then one gradient phase where every loss is
  /// summed over contexts before any optimizer step.
  IterationLog train_iteration(long long iteration) {
    IterationLog log;
    log.iteration = iteration;

    // --- collection ---
    double ret_sum = 0;
    int ret_n = 0;
    for (Worker& w : workers_) {
      Vec cond = live_condition(w, /*training=*/true);
      Vec a = sample_action(w, cond);
      step_worker(w, a);
      if (w.last_episode_return.has_value()) {
        ret_sum += *w.last_episode_return;
        ++ret_n;
      }
    }
    log.mean_episode_return = ret_n ? ret_sum / ret_n : 0.0;

    // --- gradient phase ---
    const int per_ctx = std::max(1, cfg_.batch_size / std::max(1, cfg_.n_c));
    zero_all_grads();
    for (Worker& w : workers_) {
      Batch b = sample_batch(w, per_ctx);
      Tape<S> t;
      CondNodes cn = build_condition(t, w, /*training=*/true);

      if (traits_.has_dynamics) {
        Var<S> ld =
            dynamics_loss(t, predict_dynamics(t, b, cn), t.constant(b.delta));
        log.dyn_loss += value_of(t, ld);
        t.backward(ld);
      }
      {
        Var<S> lq = critic_loss(t, b, cn);
        log.critic_loss += value_of(t, lq);
        t.backward(lq);
      }
      {
        auto [lpi, lal] = actor_alpha_losses(t, b, cn);
        log.actor_loss += value_of(t, lpi);
        log.alpha_loss += value_of(t, lal);
        t.backward(lpi);
        t.backward(lal);
      }
    }

    if (!std::isfinite(log.critic_loss) || !std::isfinite(log.actor_loss) ||
        !std::isfinite(log.dyn_loss) || !std::isfinite(log.alpha_loss))
      throw NanAbort("non-finite loss at iteration " +
                     std::to_string(iteration));

    log.grad_norm_critic = grad_norm(g_critic_);
    log.grad_norm_actor = grad_norm(g_actor_);
    log.grad_norm_dyn = grad_norm(g_dyn_);

    if (cfg_.clip_grad_norm > 0) {
      clip_grads(g_critic_, cfg_.clip_grad_norm);
      clip_grads(g_actor_, cfg_.clip_grad_norm);
      clip_grads(g_dyn_, cfg_.clip_grad_norm);
      clip_grads(g_hyper_pi_, cfg_.clip_grad_norm);
      clip_grads(g_hyper_q_, cfg_.clip_grad_norm);
    }

    opt_critic_.step(g_critic_);
    opt_actor_.step(g_actor_);
    opt_alpha_.step(g_alpha_);
    if (cfg_.alpha_min > 0) {
      S floor = static_cast<S>(std::log(cfg_.alpha_min));
      if (log_alpha_.value(0, 0) < floor) log_alpha_.value(0, 0) = floor;
    }
    if (!g_dyn_.items.empty()) opt_dyn_.step(g_dyn_);
    if (!g_hyper_pi_.items.empty()) {
      opt_hyper_pi_.step(g_hyper_pi_);
      opt_hyper_q_.step(g_hyper_q_);
    }
    detail::soft_update(g_target_, g_critic_, cfg_.tau);
    log.alpha = alpha();
    return log;
  }

  /// Deterministic zero-shot evaluation on a context list. A fresh window per
  /// context persists across its n_e episodes; masking is off; no parameter
  /// or agent-RNG writes. Returns per-context mean episode returns. If
  /// `embeddings` is given, per-step (context index, z) pairs are appended
  /// for the inferred-context variants.
  std::vector<double> evaluate(
      const std::vector<ContextPoint>& ctxs, int n_e, std::uint64_t eval_seed,
      std::vector<std::pair<int, Vec>>* embeddings = nullptr) const {
    std::vector<double> out;
    for (std::size_t ci = 0; ci < ctxs.size(); ++ci) {
      Worker w(spec_, ctxs[ci], cfg_.K);
      w.rng = Rng(eval_seed)
                  .child(tag("eval_ctx") + static_cast<std::uint64_t>(ci));
      double total = 0;
      for (int ep = 0; ep < n_e; ++ep) {
        w.obs = w.env.reset(w.rng.next_u64());
        double ep_ret = 0;
        for (int step = 0; step < spec_.horizon; ++step) {
          Vec cond = live_condition(w, /*training=*/false);
          if (embeddings && traits_.has_encoder)
            embeddings->push_back({static_cast<int>(ci), cond});
          Vec a = deterministic_action(w.obs, cond);
          StepResult r = w.env.step(a);
          w.window.push(w.obs, a, r.state_delta);
          ep_ret += r.reward;
          w.obs = r.next_state.s;
          if (r.done) break;
        }
        total += ep_ret;
      }
      out.push_back(total / n_e);
    }
    return out;
  }

  /// Diagnostic probe: rebuilds the RL losses without the stop-gradient and
  /// reads gradient norms and cosines at the shared hypernetwork. Parameters
  /// are never updated; gradient accumulators and the encoder/batch RNG
  /// streams are restored afterwards.
  ShadowGradientReport shadow_gradient_probe(int ctx_index, int batch) {
    if (!traits_.shared_hyper)
      throw std::invalid_argument(
          "shadow gradients require the shared-hypernetwork variant");
    Worker& w = workers_.at(static_cast<std::size_t>(ctx_index));
    Rng saved_enc = enc_rng_, saved_batch = batch_rng_;
    Batch b = sample_batch(w, batch);
    ShadowGradientReport rep;

    ParamGroup<S> gh;
    hyper_shared_.register_params(gh, "h");
    auto eta_grad = [&]() {
      std::vector<double> g;
      for (auto& [n, p] : gh.items)
        for (Eigen::Index i = 0; i < p->grad.size(); ++i)
          g.push_back(static_cast<double>(p->grad.data()[i]));
      return g;
    };
    auto norm = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    };
    auto cosine = [&](const std::vector<double>& a,
                      const std::vector<double>& b) {
      double d = 0;
      for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
      double na = norm(a), nb = norm(b);
      return (na > 0 && nb > 0) ? d / (na * nb) : 0.0;
    };
    auto z_grad_norm = [](Tape<S>& t, const CondNodes& cn) {
      if (cn.z.i < 0 ||
          !t.nodes_[static_cast<std::size_t>(cn.z.i)].grad_alloc)
        return 0.0;
      return static_cast<double>(t.grad(cn.z).template cast<double>().norm());
    };

    std::vector<double> gd, gpi, gq;
    zero_all_grads();
    {  // true (attached) dynamics gradient
      enc_rng_ = saved_enc;
      Tape<S> t;
      CondNodes cn = build_condition_nodes(t, w, true, /*shadow=*/false);
      Var<S> ld =
          dynamics_loss(t, predict_dynamics(t, b, cn), t.constant(b.delta));
      t.backward(ld);
      gd = eta_grad();
      rep.eta_ld = norm(gd);
    }
    zero_all_grads();
    {  // shadow actor gradient
      enc_rng_ = saved_enc;
      Tape<S> t;
      CondNodes cn = build_condition_nodes(t, w, true, /*shadow=*/true);
      auto [lpi, lal] = actor_alpha_losses(t, b, cn);
      (void)lal;
      t.backward(lpi);
      gpi = eta_grad();
      rep.eta_lpi = norm(gpi);
      rep.z_lpi = z_grad_norm(t, cn);
    }
    zero_all_grads();
    {  // shadow critic gradient
      enc_rng_ = saved_enc;
      Tape<S> t;
      CondNodes cn = build_condition_nodes(t, w, true, /*shadow=*/true);
      Var<S> lq = critic_loss(t, b, cn);
      t.backward(lq);
      gq = eta_grad();
      rep.eta_lq = norm(gq);
      rep.z_lq = z_grad_norm(t, cn);
    }
    rep.cos_ld_lpi = cosine(gd, gpi);
    rep.cos_lpi_lq = cosine(gpi, gq);
    zero_all_grads();
    enc_rng_ = saved_enc;
    batch_rng_ = saved_batch;
    return rep;
  }

  // --- loss/condition builders, exposed for tests ---

  Batch sample_batch(Worker& w, int n) {
    Batch b;
    const int sd = spec_.state_dim(), ad = spec_.action_dim();
    b.s.resize(n, sd);
    b.a.resize(n, ad);
    b.r.resize(n, 1);
    b.s2.resize(n, sd);
    b.not_terminal.resize(n, 1);
    b.delta.resize(n, sd);
    const long long hist = static_cast<long long>(w.history.size());
    const long long lo = std::max<long long>(0, hist - cfg_.buffer_capacity);
    const long long span = hist - lo;
    if (span <= 0) throw std::logic_error("sample_batch: empty buffer");
    for (int i = 0; i < n; ++i) {
      const ReplayStep& st = w.history[static_cast<std::size_t>(
          lo + static_cast<long long>(batch_rng_.uniform_index(
                   static_cast<std::uint64_t>(span))))];
      for (int j = 0; j < sd; ++j) {
        b.s(i, j) = static_cast<S>(st.s(j));
        b.s2(i, j) = static_cast<S>(st.s(j) + st.delta(j));
        b.delta(i, j) = static_cast<S>(st.delta(j));
      }
      for (int j = 0; j < ad; ++j) b.a(i, j) = static_cast<S>(st.a(j));
      b.r(i, 0) = static_cast<S>(st.r);
      b.not_terminal(i, 0) = st.terminal ? S(0) : S(1);
    }
    return b;
  }

  CondNodes build_condition(Tape<S>& t, Worker& w, bool training) {
    return build_condition_nodes(t, w, training, /*shadow=*/false);
  }

  Var<S> predict_dynamics(Tape<S>& t, const Batch& b, const CondNodes& cn) {
    Var<S> x = t.constant(hcat_mats(b.s, b.a));
    if (traits_.adapter_dynamics) return dyn_.predict_delta(t, x, &cn.omega);
    if (traits_.has_encoder) {
      // concat-z dynamics: the attached z is what trains the encoder
      Var<S> zrep = broadcast_rows(t, cn.z, b.s.rows());
      return dyn_.predict_delta(t, hcat(t, x, zrep), nullptr);
    }
    return dyn_.predict_delta(t, x, nullptr);
  }

  Var<S> critic_loss(Tape<S>& t, const Batch& b, const CondNodes& cn) {
    const int n = static_cast<int>(b.s.rows());
    // y = r + gamma * not_terminal * (min_i Qt_i(s', a') - alpha log pi(a'|s'))
    M eps = draw_noise(n, spec_.action_dim());
    Var<S> x2 = rl_input(t, t.constant(b.s2), cn, n);
    const Var<S>* om_pi = rl_omega(cn, /*for_actor=*/true);
    auto pol = actor_.fwd(t, x2, om_pi, eps, /*trainable=*/false);
    Var<S> xq2 = rl_input(t, hcat(t, t.constant(b.s2), pol.action), cn, n);
    const Var<S>* om_q = rl_omega(cn, /*for_actor=*/false);
    Var<S> qt =
        cmin(t, q1t_.fwd(t, xq2, om_q, false), q2t_.fwd(t, xq2, om_q, false));
    Var<S> soft =
        sub(t, qt, affine(t, pol.logp, static_cast<S>(alpha()), S(0)));
    M gmask = S(cfg_.gamma) * b.not_terminal;
    Var<S> y =
        t.detach(add(t, t.constant(b.r), cmul(t, t.constant(gmask), soft)));

    Var<S> xq = rl_input(t, t.constant(hcat_mats(b.s, b.a)), cn, n);
    Var<S> l1 = mean_all(t, square(t, sub(t, q1_.fwd(t, xq, om_q), y)));
    Var<S> l2 = mean_all(t, square(t, sub(t, q2_.fwd(t, xq, om_q), y)));
    return add(t, l1, l2);
  }

  std::pair<Var<S>, Var<S>> actor_alpha_losses(Tape<S>& t, const Batch& b,
                                               const CondNodes& cn) {
    const int n = static_cast<int>(b.s.rows());
    M eps = draw_noise(n, spec_.action_dim());
    Var<S> x = rl_input(t, t.constant(b.s), cn, n);
    auto pol = actor_.fwd(t, x, rl_omega(cn, true), eps, /*trainable=*/true);
    Var<S> xq = rl_input(t, hcat(t, t.constant(b.s), pol.action), cn, n);
    // critic parameters and the critic hypernetwork are frozen inside the
    // actor loss; only the actor (and its own hypernetwork) receive gradient
    const Var<S>* om_q = rl_omega_frozen(cn);
    Var<S> qmin = cmin(t, q1_.fwd(t, xq, om_q, /*trainable=*/false),
                       q2_.fwd(t, xq, om_q, /*trainable=*/false));
    Var<S> lpi = mean_all(
        t, sub(t, affine(t, pol.logp, static_cast<S>(alpha()), S(0)), qmin));

    // temperature loss: mean(-exp(log_alpha) * (logp + target_entropy).detach)
    Var<S> la_exp = exp_(t, t.leaf(log_alpha_));
    Var<S> ent_err =
        t.detach(affine(t, pol.logp, S(1), static_cast<S>(target_entropy_)));
    Var<S> lal = mean_all(
        t,
        cmul(t, affine(t, broadcast_rows(t, la_exp, n), S(-1), S(0)), ent_err));
    return {lpi, lal};
  }

  /// Live-window (or explicit) condition vector for acting/evaluation.
  /// Consumes the worker's own RNG stream.
  Vec live_condition(Worker& w, bool training) const {
    if (traits_.has_encoder)
      return encoder_.encode_one(w.window, w.rng, training);
    if (traits_.explicit_context) return explicit_context_vec(w.ctx);
    return Vec();
  }

  Vec deterministic_action(const Vec& obs, const Vec& cond) const {
    Agent& self = const_cast<Agent&>(*this);
    Tape<S> t;
    CondNodes cn = self.cond_from_vec(t, cond);
    M s(1, obs.size());
    for (int j = 0; j < obs.size(); ++j) s(0, j) = static_cast<S>(obs(j));
    Var<S> x = self.rl_input(t, t.constant(s), cn, 1);
    M eps = M::Zero(1, spec_.action_dim());
    auto pol = self.actor_.fwd(t, x, self.rl_omega(cn, true), eps, false);
    Vec a(spec_.action_dim());
    for (int j = 0; j < a.size(); ++j)
      a(j) = static_cast<double>(t.val(pol.mu_tanh)(0, j));
    return a;
  }

  Vec explicit_context_vec(const ContextPoint& c) const {
    Vec v(spec_.context_dim());
    int i = 0;
    for (double x : c.continuous) v(i++) = x;
    if (spec_.has_inversion) v(i++) = c.inversion;
    return v;
  }

  void zero_all_grads() {
    g_actor_.zero_grad();
    g_critic_.zero_grad();
    g_alpha_.zero_grad();
    g_dyn_.zero_grad();
    g_hyper_pi_.zero_grad();
    g_hyper_q_.zero_grad();
  }

  // parameter groups and components, exposed for checkpoints and tests
  ParamGroup<S>& group_actor() { return g_actor_; }
  ParamGroup<S>& group_critic() { return g_critic_; }
  ParamGroup<S>& group_targets() { return g_target_; }
  ParamGroup<S>& group_alpha() { return g_alpha_; }
  ParamGroup<S>& group_dyn() { return g_dyn_; }
  ParamGroup<S>& group_hyper_pi() { return g_hyper_pi_; }
  ParamGroup<S>& group_hyper_q() { return g_hyper_q_; }
  Encoder<S>& encoder() { return encoder_; }
  Hypernet<S>& hyper_shared() { return hyper_shared_; }
  DynamicsModel<S>& dynamics() { return dyn_; }
  GaussianActor<S>& actor() { return actor_; }
  QNet<S>& q1() { return q1_; }
  QNet<S>& q2() { return q2_; }
  QNet<S>& q1_target() { return q1t_; }
  QNet<S>& q2_target() { return q2t_; }
  std::vector<Worker>& workers() { return workers_; }
  Rng& enc_rng() { return enc_rng_; }
  Rng& batch_rng() { return batch_rng_; }
  Adam<S>& opt_actor() { return opt_actor_; }
  Adam<S>& opt_critic() { return opt_critic_; }
  Adam<S>& opt_alpha() { return opt_alpha_; }
  Adam<S>& opt_dyn() { return opt_dyn_; }
  Adam<S>& opt_hyper_pi() { return opt_hyper_pi_; }
  Adam<S>& opt_hyper_q() { return opt_hyper_q_; }
  Param<S>& log_alpha() { return log_alpha_; }

 private:
  /// Builds the condition nodes for one context. shadow=true keeps the RL
  /// paths attached for the diagnostic probe.
  CondNodes build_condition_nodes(Tape<S>& t, Worker& w, bool training,
                                  bool shadow) {
    CondNodes cn;
    if (traits_.has_encoder) {
      cn.z = encoder_.encode(t, {&w.window}, enc_rng_, training);
      cn.has_z = true;
    } else if (traits_.explicit_context) {
      cn.z = t.constant(row_of(explicit_context_vec(w.ctx)));
      cn.has_z = true;
    }
    if (traits_.shared_hyper) {
      cn.omega = hyper_shared_.generate(t, cn.z);
      cn.omega_rl = (traits_.detach_cond_in_rl && !shadow) ? t.detach(cn.omega)
                                                           : cn.omega;
      cn.has_shared = true;
    } else if (traits_.adapter_rl) {
      // separate hypernetworks: the encoder stays dynamics-trained, so the
      // RL hypernetworks consume a detached z
      Var<S> z_rl_in = traits_.has_encoder ? t.detach(cn.z) : cn.z;
      cn.omega_pi = hyper_pi_.generate(t, z_rl_in);
      cn.omega_q = hyper_q_.generate(t, z_rl_in);
      cn.omega_q_frozen = t.detach(cn.omega_q);
      if (traits_.adapter_dynamics) cn.omega = hyper_f_.generate(t, cn.z);
      cn.has_sep = true;
    }
    if (cn.has_z)
      cn.z_rl = (traits_.detach_cond_in_rl && !traits_.adapter_rl && !shadow)
                    ? t.detach(cn.z)
                    : cn.z;
    return cn;
  }

  /// Condition nodes from a precomputed condition vector (acting path; no
  /// gradients anywhere).
  CondNodes cond_from_vec(Tape<S>& t, const Vec& cond) {
    CondNodes cn;
    if (cond.size() == 0) return cn;
    cn.z = t.constant(row_of(cond));
    cn.z_rl = cn.z;
    cn.has_z = true;
    if (traits_.shared_hyper) {
      cn.omega = hyper_shared_.generate(t, cn.z, false);
      cn.omega_rl = cn.omega;
      cn.has_shared = true;
    } else if (traits_.adapter_rl) {
      cn.omega_pi = hyper_pi_.generate(t, cn.z, false);
      cn.omega_q = hyper_q_.generate(t, cn.z, false);
      cn.omega_q_frozen = cn.omega_q;
      cn.has_sep = true;
    }
    return cn;
  }

  /// Actor/critic input: concat variants append the (possibly detached)
  /// condition; adapter variants leave the input alone.
  Var<S> rl_input(Tape<S>& t, Var<S> x, const CondNodes& cn, int n) {
    if (!cn.has_z || traits_.adapter_rl) return x;
    return hcat(t, x, broadcast_rows(t, cn.z_rl, n));
  }

  const Var<S>* rl_omega(const CondNodes& cn, bool for_actor) {
    if (!traits_.adapter_rl) return nullptr;
    if (cn.has_sep) {
      om_tmp_ = for_actor ? cn.omega_pi : cn.omega_q;
    } else {
      om_tmp_ = cn.omega_rl;
    }
    return &om_tmp_;
  }

  /// Critic adapter weights for use inside the actor loss: frozen for the
  /// separate-hypernetwork variants (only the critic loss trains eta_Q); the
  /// shared variant uses its regular (detached-in-training) omega.
  const Var<S>* rl_omega_frozen(const CondNodes& cn) {
    if (!traits_.adapter_rl) return nullptr;
    om_tmp2_ = cn.has_sep ? cn.omega_q_frozen : cn.omega_rl;
    return &om_tmp2_;
  }

  Vec sample_action(Worker& w, const Vec& cond) {
    Tape<S> t;
    CondNodes cn = cond_from_vec(t, cond);
    M s(1, w.obs.size());
    for (int j = 0; j < w.obs.size(); ++j) s(0, j) = static_cast<S>(w.obs(j));
    Var<S> x = rl_input(t, t.constant(s), cn, 1);
    M eps(1, spec_.action_dim());
    for (int j = 0; j < spec_.action_dim(); ++j)
      eps(0, j) = static_cast<S>(w.rng.normal());
    auto pol = actor_.fwd(t, x, rl_omega(cn, true), eps, false);
    Vec a(spec_.action_dim());
    for (int j = 0; j < a.size(); ++j)
      a(j) = static_cast<double>(t.val(pol.action)(0, j));
    return a;
  }

  void step_worker(Worker& w, const Vec& a) {
    StepResult r = w.env.step(a);
    bool truncated = r.next_state.step_count >= spec_.horizon;
    w.history.push_back(
        {w.obs, a, r.state_delta, r.reward, r.done && !truncated});
    w.window.push(w.obs, a, r.state_delta);
    w.running_return += r.reward;
    w.obs = r.next_state.s;
    if (r.done) {
      w.last_episode_return = w.running_return;
      w.running_return = 0;
      w.obs = w.env.reset(w.rng.next_u64());
      // the window persists across episodes of the same training context
    }
  }

  Var<S> broadcast_rows(Tape<S>& t, Var<S> v, Eigen::Index n) {
    if (t.val(v).rows() == n) return v;
    return matmul(t, t.constant(M::Ones(n, 1)), v);
  }

  M draw_noise(int n, int d) {
    M e(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j)
        e(i, j) = static_cast<S>(batch_rng_.normal());
    return e;
  }

  static M hcat_mats(const M& a, const M& b) {
    M y(a.rows(), a.cols() + b.cols());
    y << a, b;
    return y;
  }

  static M row_of(const Vec& v) {
    M m(1, v.size());
    for (int j = 0; j < v.size(); ++j) m(0, j) = static_cast<S>(v(j));
    return m;
  }

  static double value_of(Tape<S>& t, Var<S> v) {
    return static_cast<double>(t.val(v)(0, 0));
  }

  static void clip_grads(ParamGroup<S>& g, double max_norm) {
    double n = grad_norm(g);
    if (n <= max_norm) return;
    S scale = static_cast<S>(max_norm / n);
    for (auto& [name, p] : g.items) p->grad *= scale;
  }

  static double grad_norm(ParamGroup<S>& g) {
    double s = 0;
    for (auto& [n, p] : g.items)
      s += static_cast<double>(p->grad.template cast<double>().squaredNorm());
    return std::sqrt(s);
  }

  AgentConfig cfg_;
  VariantTraits traits_;
  EnvSpec spec_;
  std::vector<ContextPoint> contexts_;
  int cond_dim_ = 0;
  double target_entropy_ = 0;

  GaussianActor<S> actor_;
  QNet<S> q1_, q2_, q1t_, q2t_;
  Param<S> log_alpha_;
  Encoder<S> encoder_;
  DynamicsModel<S> dyn_;
  Hypernet<S> hyper_shared_, hyper_pi_, hyper_q_, hyper_f_;

  ParamGroup<S> g_actor_, g_critic_, g_target_, g_alpha_, g_dyn_, g_hyper_pi_,
      g_hyper_q_;
  Adam<S> opt_actor_, opt_critic_, opt_alpha_, opt_dyn_, opt_hyper_pi_,
      opt_hyper_q_;

  std::vector<Worker> workers_;
  Rng master_, enc_rng_, batch_rng_;
  Var<S> om_tmp_, om_tmp2_;
};

}  // namespace aib
