#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace dmp {

/// Counter-based generator (Philox4x32-10). A stream is identified by a
/// 64-bit key; draws are a pure function of (key, block counter), so streams
/// keyed by (seed, chain) or (seed, draw, group, time, channel) reproduce
/// identically regardless of thread schedule.
class Rng {
public:
  explicit Rng(uint64_t key);

  /// Mixes an arbitrary tuple of identifiers into a stream key.
  static uint64_t derive_key(uint64_t seed, std::initializer_list<uint64_t> parts);

  /// Raw Philox4x32-10 block function, exposed for known-answer tests.
  static std::array<uint32_t, 4> philox_block(const std::array<uint32_t, 4>& ctr,
                                              const std::array<uint32_t, 2>& key);

  uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double u01();
  /// Uniform on (0, 1), safe for log().
  double u01_open();
  double uniform(double lo, double hi);
  double normal();
  double exponential(double rate);
  double gamma(double shape, double scale);
  double beta(double a, double b);
  long long poisson(double lambda);
  long long binomial(long long n, double p);
  bool bernoulli(double p);
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n);

private:
  std::array<uint32_t, 4> block(uint64_t counter) const;
  void refill();

  uint32_t key_[2];
  uint64_t counter_ = 0;
  std::array<uint32_t, 4> buf_{};
  int buf_pos_ = 4;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

} // namespace dmp
