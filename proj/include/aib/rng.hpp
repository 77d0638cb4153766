#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace aib {

/// Counter-based deterministic random stream. Every consumer derives its own
/// stream from (seed, tag...) so parallel collection order cannot change the
/// numbers a component sees. Draws are always computed in double and cast by
/// the caller, so float32 and float64 runs consume identical streams.
class Rng {
 public:
  Rng() : state_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(std::uint64_t seed) : state_(mix(seed + 0x9e3779b97f4a7c15ull)) {}

  /// Derives an independent child stream from this one and a tag.
  Rng child(std::uint64_t tag) const {
    Rng r;
    r.state_ = mix(state_ ^ mix(tag + 0xbf58476d1ce4e5b9ull));
    return r;
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  /// Standard normal via Box-Muller (no cached spare: keeps the stream
  /// position independent of call parity).
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

/// FNV-1a over a string, for deriving stream tags from names.
inline std::uint64_t tag(const char* s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (; *s; ++s) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(*s));
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace aib
