#include "dmpanel/rng.hpp"

#include <cmath>

namespace dmp {
namespace {

constexpr uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr uint32_t kPhiloxW1 = 0xBB67AE85u;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline void philox_round(uint32_t c[4], uint32_t k0, uint32_t k1) {
  const uint64_t p0 = static_cast<uint64_t>(kPhiloxM0) * c[0];
  const uint64_t p1 = static_cast<uint64_t>(kPhiloxM1) * c[2];
  const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32);
  const uint32_t lo0 = static_cast<uint32_t>(p0);
  const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32);
  const uint32_t lo1 = static_cast<uint32_t>(p1);
  const uint32_t n0 = hi1 ^ c[1] ^ k0;
  const uint32_t n1 = lo1;
  const uint32_t n2 = hi0 ^ c[3] ^ k1;
  const uint32_t n3 = lo0;
  c[0] = n0;
  c[1] = n1;
  c[2] = n2;
  c[3] = n3;
}

} // namespace

Rng::Rng(uint64_t key) {
  key_[0] = static_cast<uint32_t>(key);
  key_[1] = static_cast<uint32_t>(key >> 32);
}

uint64_t Rng::derive_key(uint64_t seed, std::initializer_list<uint64_t> parts) {
  uint64_t h = splitmix64(seed);
  for (uint64_t p : parts) {
    h = splitmix64(h ^ splitmix64(p));
  }
  return h;
}

std::array<uint32_t, 4> Rng::philox_block(const std::array<uint32_t, 4>& ctr,
                                          const std::array<uint32_t, 2>& key) {
  uint32_t c[4] = {ctr[0], ctr[1], ctr[2], ctr[3]};
  uint32_t k0 = key[0];
  uint32_t k1 = key[1];
  for (int r = 0; r < 10; ++r) {
    philox_round(c, k0, k1);
    k0 += kPhiloxW0;
    k1 += kPhiloxW1;
  }
  return {c[0], c[1], c[2], c[3]};
}

std::array<uint32_t, 4> Rng::block(uint64_t counter) const {
  return philox_block({static_cast<uint32_t>(counter),
                       static_cast<uint32_t>(counter >> 32), 0u, 0u},
                      {key_[0], key_[1]});
}

void Rng::refill() {
  buf_ = block(counter_++);
  buf_pos_ = 0;
}

uint64_t Rng::next_u64() {
  if (buf_pos_ > 2) refill();
  const uint64_t lo = buf_[buf_pos_];
  const uint64_t hi = buf_[buf_pos_ + 1];
  buf_pos_ += 2;
  return (hi << 32) | lo;
}

double Rng::u01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::u01_open() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

double Rng::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  const double u1 = u01_open();
  const double u2 = u01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 6.283185307179586476925286766559 * u2;
  cached_normal_ = r * std::sin(a);
  has_cached_normal_ = true;
  return r * std::cos(a);
}

double Rng::exponential(double rate) { return -std::log(u01_open()) / rate; }

double Rng::gamma(double shape, double scale) {
  if (shape < 1.0) {
    // boost trick: G(a) = G(a + 1) * U^(1/a)
    const double u = u01_open();
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = u01_open();
    if (u < 1.0 - 0.0331 * x * x * x * x) return scale * d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return scale * d * v;
  }
}

double Rng::beta(double a, double b) {
  const double ga = gamma(a, 1.0);
  const double gb = gamma(b, 1.0);
  return ga / (ga + gb);
}

long long Rng::poisson(double lambda) {
  long long result = 0;
  // gamma split keeps the multiplicative Knuth loop short for large rates
  while (lambda > 12.0) {
    const long long m = static_cast<long long>(lambda * 0.875);
    const double g = gamma(static_cast<double>(m), 1.0);
    if (g <= lambda) {
      result += m;
      lambda -= g;
    } else {
      return result + binomial(m - 1, lambda / g);
    }
  }
  const double limit = std::exp(-lambda);
  double prod = u01_open();
  long long k = 0;
  while (prod > limit) {
    ++k;
    prod *= u01_open();
  }
  return result + k;
}

long long Rng::binomial(long long n, double p) {
  if (n <= 0) return 0;
  if (p <= 0.0) return 0;
  if (p >= 1.0) return n;
  long long result = 0;
  while (n > 32) {
    // order-statistic split: V is the a-th smallest of n uniforms
    const long long a = 1 + n / 2;
    const double v = beta(static_cast<double>(a), static_cast<double>(n - a + 1));
    if (v <= p) {
      result += a;
      p = (p - v) / (1.0 - v);
      n = n - a;
    } else {
      p = p / v;
      n = a - 1;
    }
  }
  for (long long i = 0; i < n; ++i) {
    if (u01() < p) ++result;
  }
  return result;
}

bool Rng::bernoulli(double p) { return u01() < p; }

uint64_t Rng::below(uint64_t n) {
  // rejection keeps the draw exactly uniform
  const uint64_t limit = n * (UINT64_MAX / n);
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

} // namespace dmp
