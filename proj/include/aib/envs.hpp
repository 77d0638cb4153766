#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aib/rng.hpp"

namespace aib {

using Vec = Eigen::VectorXd;

enum class EnvName { DI, DI_FRICTION, ODE, ODE_K };

inline const char* env_name_str(EnvName n) {
  switch (n) {
    case EnvName::DI: return "di";
    case EnvName::DI_FRICTION: return "di_friction";
    case EnvName::ODE: return "ode";
    case EnvName::ODE_K: return "ode_k";
  }
  return "?";
}

inline EnvName env_name_parse(const std::string& s) {
  if (s == "di") return EnvName::DI;
  if (s == "di_friction") return EnvName::DI_FRICTION;
  if (s == "ode") return EnvName::ODE;
  if (s == "ode_k") return EnvName::ODE_K;
  throw std::invalid_argument("unknown env name: " + s);
}

/// Union of closed-ish intervals; sampling is uniform over total length.
struct Support {
  struct Piece {
    double lo, hi;
  };
  std::vector<Piece> pieces;

  double length() const {
    double l = 0;
    for (auto& p : pieces) l += p.hi - p.lo;
    return l;
  }
  double sample(Rng& rng) const {
    if (pieces.empty() || length() <= 0)
      throw std::invalid_argument("empty context support");
    double u = rng.uniform() * length();
    for (auto& p : pieces) {
      double w = p.hi - p.lo;
      if (u < w) return p.lo + u;
      u -= w;
    }
    return pieces.back().hi;
  }
  bool contains(double x) const {
    for (auto& p : pieces)
      if (x >= p.lo && x <= p.hi) return true;
    return false;
  }
};

/// Sampling supports for one continuous context dimension across the three
/// evaluation regimes.
struct ContextDim {
  std::string label;
  Support train, eval_in, eval_out;
};

struct EnvSpec {
  EnvName name;
  int k = 2;  // polynomial order for ODE_K (ODE fixes k=2)
  int horizon = 0;
  double dt = 0.1;
  double return_lo = 0, return_hi = 0;
  std::vector<ContextDim> dims;
  bool has_inversion = false;

  int state_dim() const {
    return (name == EnvName::DI || name == EnvName::DI_FRICTION) ? 4 : 1;
  }
  int action_dim() const {
    return (name == EnvName::DI || name == EnvName::DI_FRICTION) ? 2 : 1;
  }
  int context_dim() const {
    return static_cast<int>(dims.size()) + (has_inversion ? 1 : 0);
  }

  static EnvSpec make(EnvName name, int k = 2);
};

inline EnvSpec EnvSpec::make(EnvName name, int k) {
  EnvSpec s;
  s.name = name;
  auto std_dim = [](const std::string& label) {
    ContextDim d;
    d.label = label;
    d.train = {{{0.5, 1.5}}};
    d.eval_in = {{{0.5, 1.5}}};
    d.eval_out = {{{0.1, 0.5}, {1.5, 2.0}}};
    return d;
  };
  auto ode_dim = [](const std::string& label) {
    ContextDim d;
    d.label = label;
    d.train = {{{-5.0, 5.0}}};
    d.eval_in = {{{-5.0, 5.0}}};
    d.eval_out = {{{-10.0, -5.0}, {5.0, 10.0}}};
    return d;
  };
  switch (name) {
    case EnvName::DI:
      s.horizon = 100;
      s.return_lo = 0;
      s.return_hi = 100;
      s.dims = {std_dim("mass")};
      s.has_inversion = true;
      s.k = 0;
      break;
    case EnvName::DI_FRICTION:
      s.horizon = 100;
      s.return_lo = 0;
      s.return_hi = 100;
      s.dims = {std_dim("mass"), std_dim("friction")};
      s.k = 0;
      break;
    case EnvName::ODE:
      s.horizon = 200;
      s.return_lo = 0;
      s.return_hi = 200;
      s.k = 2;
      s.dims = {ode_dim("c1"), ode_dim("c2")};
      break;
    case EnvName::ODE_K:
      if (k < 1) throw std::invalid_argument("ODE-k requires k >= 1");
      s.horizon = 200;
      s.return_lo = 0;
      s.return_hi = 200;
      s.k = k;
      for (int j = 1; j <= k; ++j)
        s.dims.push_back(ode_dim("c" + std::to_string(j)));
      break;
  }
  return s;
}

struct ContextPoint {
  std::vector<double> continuous;
  int inversion = 0;  // +1 / -1, or 0 when the env has no inversion flag

  bool same_continuous(const ContextPoint& o) const {
    if (continuous.size() != o.continuous.size()) return false;
    for (std::size_t i = 0; i < continuous.size(); ++i)
      if (continuous[i] != o.continuous[i]) return false;
    return true;
  }
};

struct ContextSetTriple {
  std::vector<ContextPoint> train, eval_in, eval_out;
};

/// Samples the three disjoint context sets. Continuous dims are uniform over
/// the per-set supports; disjointness is enforced by exact-value rejection.
/// The binary inversion dim alternates so each set is balanced 50/50.
inline ContextSetTriple sample_context_sets(const EnvSpec& spec, int n_c,
                                            std::uint64_t seed) {
  if (n_c < 1) throw std::invalid_argument("n_c must be >= 1");
  Rng rng = Rng(seed).child(tag("context_sets"));
  ContextSetTriple out;
  std::vector<ContextPoint> all;
  auto sample_set = [&](std::vector<ContextPoint>& set,
                        Support ContextDim::* sup, std::uint64_t set_tag) {
    Rng r = rng.child(set_tag);
    for (int i = 0; i < n_c; ++i) {
      ContextPoint p;
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000)
          throw std::runtime_error("context rejection sampling stuck");
        p.continuous.clear();
        for (auto& d : spec.dims) p.continuous.push_back((d.*sup).sample(r));
        bool clash = false;
        for (auto& q : all)
          if (q.same_continuous(p)) clash = true;
        if (!clash) break;
      }
      if (spec.has_inversion) p.inversion = (i % 2 == 0) ? +1 : -1;
      set.push_back(p);
      all.push_back(p);
    }
  };
  sample_set(out.train, &ContextDim::train, tag("train"));
  sample_set(out.eval_in, &ContextDim::eval_in, tag("eval_in"));
  sample_set(out.eval_out, &ContextDim::eval_out, tag("eval_out"));
  return out;
}

/// c * a for the actuator inversion flag (identity when c = +1).
inline Vec invert_action(const Vec& a, int c) {
  return static_cast<double>(c) * a;
}

struct EnvState {
  Vec s;
  int step_count = 0;
};

struct StepResult {
  EnvState next_state;
  double reward = 0;
  bool done = false;
  Vec state_delta;
};

constexpr double kDiGoalRadius = 0.25;
constexpr double kOdeOverflow = 1e6;

/// One pure transition of the double-integrator family.
/// F = c * a (DI) or F = a (DI-Friction); semi-implicit Euler.
inline StepResult step_di(const EnvState& state, const Vec& a,
                          const ContextPoint& ctx, const EnvSpec& spec) {
  if (!state.s.allFinite() || !a.allFinite())
    throw std::runtime_error("non-finite state or action in step_di");
  double m = ctx.continuous.at(0);
  double mu = spec.name == EnvName::DI_FRICTION ? ctx.continuous.at(1) : 0.0;
  Vec F = spec.name == EnvName::DI ? invert_action(a, ctx.inversion) : a;
  Eigen::Vector2d p = state.s.head<2>(), v = state.s.tail<2>();
  Eigen::Vector2d v2 = v + (F / m - mu * v) * spec.dt;
  Eigen::Vector2d p2 = p + v2 * spec.dt;
  StepResult r;
  r.next_state.s.resize(4);
  r.next_state.s << p2, v2;
  r.next_state.step_count = state.step_count + 1;
  r.reward = p2.norm() < kDiGoalRadius ? 1.0 : 0.0;
  r.done = r.next_state.step_count >= spec.horizon;
  r.state_delta = r.next_state.s - state.s;
  return r;
}

/// One pure transition of the polynomial regulation family:
/// x' = x + (sum_j c_j a^j) dt, reward max(0, 1 - |x'|).
inline StepResult step_ode_k(const EnvState& state, double a,
                             const ContextPoint& ctx, const EnvSpec& spec) {
  if (!std::isfinite(state.s(0)) || !std::isfinite(a))
    throw std::runtime_error("non-finite state or action in step_ode_k");
  double xdot = 0, ap = 1;
  for (int j = 0; j < spec.k; ++j) {
    ap *= a;
    xdot += ctx.continuous.at(static_cast<std::size_t>(j)) * ap;
  }
  double x2 = state.s(0) + xdot * spec.dt;
  StepResult r;
  r.next_state.s.resize(1);
  r.next_state.s(0) = x2;
  r.next_state.step_count = state.step_count + 1;
  if (std::abs(x2) > kOdeOverflow) {
    r.reward = 0.0;
    r.done = true;
  } else {
    r.reward = std::max(0.0, 1.0 - std::abs(x2));
    r.done = r.next_state.step_count >= spec.horizon;
  }
  r.state_delta = r.next_state.s - state.s;
  return r;
}

/// A single environment instance: reset(seed)/step(action) with the usual
/// (observation, reward, terminated, truncated) conventions. Adapter seam for
/// plugging other physics backends.
class EnvInterface {
 public:
  virtual ~EnvInterface() = default;
  virtual Vec reset(std::uint64_t episode_seed) = 0;
  virtual StepResult step(const Vec& action) = 0;
  virtual const EnvSpec& spec() const = 0;
  virtual const ContextPoint& context() const = 0;
};

class Env final : public EnvInterface {
 public:
  Env(EnvSpec spec, ContextPoint ctx)
      : spec_(std::move(spec)), ctx_(std::move(ctx)) {}

  Vec reset(std::uint64_t episode_seed) override {
    Rng rng = Rng(episode_seed).child(tag("env_reset"));
    state_.step_count = 0;
    if (spec_.name == EnvName::DI || spec_.name == EnvName::DI_FRICTION) {
      double radius = rng.uniform(1.0, 2.0);
      double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
      state_.s.resize(4);
      state_.s << radius * std::cos(theta), radius * std::sin(theta), 0.0,
          0.0;
    } else {
      double mag = rng.uniform(0.5, 2.0);
      double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      state_.s.resize(1);
      state_.s(0) = sign * mag;
    }
    return state_.s;
  }

  StepResult step(const Vec& action) override {
    Vec a = action.cwiseMax(-1.0).cwiseMin(1.0);
    StepResult r;
    if (spec_.name == EnvName::DI || spec_.name == EnvName::DI_FRICTION) {
      r = step_di(state_, a, ctx_, spec_);
    } else {
      r = step_ode_k(state_, a(0), ctx_, spec_);
    }
    state_ = r.next_state;
    return r;
  }

  const EnvSpec& spec() const override { return spec_; }
  const ContextPoint& context() const override { return ctx_; }
  const EnvState& state() const { return state_; }

 private:
  EnvSpec spec_;
  ContextPoint ctx_;
  EnvState state_;
};

struct Transition {
  Vec s, a, delta;
  double reward = 0;
  bool done = false;
};

/// Runs one full episode under a deterministic callback policy. Out-of-bound
/// actions are clipped (Env::step clips; we count them for the caller).
struct RolloutResult {
  double episode_return = 0;
  std::vector<Transition> transitions;
  int clipped_actions = 0;
};

inline RolloutResult rollout(
    const std::function<Vec(const Vec&, int)>& policy, const EnvSpec& spec,
    const ContextPoint& ctx, std::uint64_t episode_seed) {
  Env env(spec, ctx);
  Vec obs = env.reset(episode_seed);
  RolloutResult out;
  for (int t = 0; t < spec.horizon; ++t) {
    Vec a = policy(obs, t);
    if ((a.array().abs() > 1.0).any()) {
      ++out.clipped_actions;
      a = a.cwiseMax(-1.0).cwiseMin(1.0);
    }
    StepResult r = env.step(a);
    out.transitions.push_back({obs, a, r.state_delta, r.reward, r.done});
    out.episode_return += r.reward;
    obs = r.next_state.s;
    if (r.done) break;
  }
  return out;
}

}  // namespace aib
