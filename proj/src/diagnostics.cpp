#include "dmpanel/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>

namespace dmp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// In-place iterative radix-2 Cooley-Tukey transform; n must be a power of 2.
void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

bool degenerate(const Eigen::MatrixXd& x) {
  const double first = x(0, 0);
  for (int c = 0; c < x.cols(); ++c)
    for (int r = 0; r < x.rows(); ++r)
      if (x(r, c) != first) return false;
  return true;
}

// Classic potential-scale-reduction on already transformed draws.
double basic_rhat(const Eigen::MatrixXd& z) {
  const int n = static_cast<int>(z.rows());
  const int m = static_cast<int>(z.cols());
  Eigen::VectorXd chain_mean = z.colwise().mean();
  double within = 0.0;
  for (int c = 0; c < m; ++c)
    within += (z.col(c).array() - chain_mean[c]).square().sum() / (n - 1.0);
  within /= m;
  double grand = chain_mean.mean();
  double between = n * (chain_mean.array() - grand).square().sum() / (m - 1.0);
  double var_plus = (n - 1.0) / n * within + between / n;
  return std::sqrt(var_plus / within);
}

// Effective sample size of transformed split chains via Geyer's initial
// positive and monotone sequences; NaN when the pooled draws are constant.
double basic_ess(const Eigen::MatrixXd& z) {
  const int n = static_cast<int>(z.rows());
  const int m = static_cast<int>(z.cols());
  if (degenerate(z)) return kNaN;

  std::vector<double> acov_mean(static_cast<std::size_t>(n), 0.0);
  for (int c = 0; c < m; ++c) {
    std::vector<double> ac = autocovariance_fft(z.col(c));
    for (int t = 0; t < n; ++t) acov_mean[t] += ac[t] / m;
  }
  Eigen::VectorXd chain_mean = z.colwise().mean();
  double mean_var = acov_mean[0] * n / (n - 1.0);
  double var_plus = mean_var * (n - 1.0) / n;
  if (m > 1) {
    double grand = chain_mean.mean();
    var_plus += (chain_mean.array() - grand).square().sum() / (m - 1.0);
  }
  if (!(var_plus > 0.0)) return kNaN;

  std::vector<double> rho(static_cast<std::size_t>(n), 0.0);
  int t = 0;
  double even = 1.0;
  rho[0] = even;
  double odd = 1.0 - (mean_var - acov_mean[1]) / var_plus;
  rho[1] = odd;
  while (t < n - 5 && std::isfinite(even + odd) && even + odd > 0.0) {
    t += 2;
    even = 1.0 - (mean_var - acov_mean[t]) / var_plus;
    odd = 1.0 - (mean_var - acov_mean[t + 1]) / var_plus;
    if (even + odd >= 0.0) {
      rho[t] = even;
      rho[t + 1] = odd;
    }
  }
  const int max_t = t;
  if (even > 0.0) rho[max_t] = even;

  t = 0;
  while (t <= max_t - 4) {
    t += 2;
    if (rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1]) {
      rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
      rho[t + 1] = rho[t];
    }
  }

  const double total = static_cast<double>(m) * n;
  double tau = -1.0 + rho[max_t];
  for (int lag = 0; lag < max_t; ++lag) tau += 2.0 * rho[lag];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

Eigen::MatrixXd fold(const Eigen::MatrixXd& x) {
  std::vector<double> pooled(x.data(), x.data() + x.size());
  double med = quantile_type7(std::move(pooled), 0.5);
  return (x.array() - med).abs();
}

Eigen::MatrixXd exceedance(const Eigen::MatrixXd& x, double prob, bool upper) {
  std::vector<double> pooled(x.data(), x.data() + x.size());
  double q = quantile_type7(std::move(pooled), prob);
  Eigen::MatrixXd ind(x.rows(), x.cols());
  for (int c = 0; c < x.cols(); ++c)
    for (int r = 0; r < x.rows(); ++r)
      ind(r, c) = upper ? (x(r, c) >= q ? 1.0 : 0.0) : (x(r, c) <= q ? 1.0 : 0.0);
  return ind;
}

} // namespace

double inv_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    return kNaN;
  }
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    const double num =
        q * (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                   6.7265770927008700853e+4) *
                      r +
                  4.5921953931549871457e+4) *
                     r +
                 1.3731693765509461125e+4) *
                    r +
                1.9715909503065514427e+3) *
                   r +
               1.3314166789178437745e+2) *
                  r +
              3.3871328727963666080e+0);
    const double den = (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                             3.9307895800092710610e+4) *
                                r +
                            2.1213794301586595867e+4) *
                               r +
                           5.3941960214247511077e+3) *
                              r +
                          6.8718700749205790830e+2) *
                             r +
                         4.2313330701600911252e+1) *
                            r +
                        1.0);
    return num / den;
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    const double num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                             2.41780725177450611770e-1) *
                                r +
                            1.27045825245236838258e+0) *
                               r +
                           3.64784832476320460504e+0) *
                              r +
                          5.76949722146069140550e+0) *
                             r +
                         4.63033784615654529590e+0) *
                            r +
                        1.42343711074968357734e+0);
    const double den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                             1.51986665636164571966e-2) *
                                r +
                            1.48103976427480074590e-1) *
                               r +
                           6.89767334985100004550e-1) *
                              r +
                          1.67638483018380384940e+0) *
                             r +
                         2.05319162663775882187e+0) *
                            r +
                        1.0);
    val = num / den;
  } else {
    r -= 5.0;
    const double num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                             1.24266094738807843860e-3) *
                                r +
                            2.65321895265761230930e-2) *
                               r +
                           2.96560571828504891230e-1) *
                              r +
                          1.78482653991729133580e+0) *
                             r +
                         5.46378491116411436990e+0) *
                            r +
                        6.65790464350110377720e+0);
    const double den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                             1.84631831751005468180e-5) *
                                r +
                            7.86869131145613259100e-4) *
                               r +
                           1.48753612908506148525e-2) *
                              r +
                          1.36929880922735805310e-1) *
                             r +
                         5.99832206555887937690e-1) *
                            r +
                        1.0);
    val = num / den;
  }
  return q < 0.0 ? -val : val;
}

double quantile_type7(std::vector<double> xs, double p) {
  if (xs.empty()) throw spec_error("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw spec_error("quantile probability must lie in [0, 1]");
  std::sort(xs.begin(), xs.end());
  const double h = (static_cast<double>(xs.size()) - 1.0) * p;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= xs.size()) return xs.back();
  const double frac = h - static_cast<double>(lo);
  return xs[lo] + frac * (xs[lo + 1] - xs[lo]);
}

std::vector<double> autocovariance_fft(const Eigen::VectorXd& y) {
  const int n = static_cast<int>(y.size());
  if (n < 2) throw spec_error("autocovariance needs at least 2 values");
  std::size_t padded = 1;
  while (padded < static_cast<std::size_t>(2 * n)) padded <<= 1;

  const double mean = y.mean();
  std::vector<std::complex<double>> a(padded, std::complex<double>(0.0, 0.0));
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i)] = y[i] - mean;
  fft_pow2(a, false);
  for (auto& x : a) x = x * std::conj(x);
  fft_pow2(a, true);

  std::vector<double> out(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) out[static_cast<std::size_t>(t)] = a[static_cast<std::size_t>(t)].real() / n;
  return out;
}

Eigen::MatrixXd split_chains(const Eigen::MatrixXd& chains) {
  const int n = static_cast<int>(chains.rows());
  const int m = static_cast<int>(chains.cols());
  const int pieces = m == 1 ? 4 : 2;
  const int seg = n / pieces;
  if (seg < 8)
    throw spec_error("too few iterations for diagnostics: " + std::to_string(n) +
                     " draws per chain give split segments shorter than 8");
  Eigen::MatrixXd out(seg, m * pieces);
  for (int c = 0; c < m; ++c) {
    if (pieces == 2) {
      // drop the middle draw when the chain length is odd
      out.col(2 * c) = chains.col(c).head(seg);
      out.col(2 * c + 1) = chains.col(c).tail(seg);
    } else {
      for (int piece = 0; piece < 4; ++piece)
        out.col(4 * c + piece) = chains.col(c).segment(piece * seg, seg);
    }
  }
  return out;
}

Eigen::MatrixXd rank_normalize(const Eigen::MatrixXd& x) {
  const Eigen::Index total = x.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return x(a) < x(b); });

  Eigen::MatrixXd z(x.rows(), x.cols());
  const double denom = static_cast<double>(total) + 0.25;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x(order[j + 1]) == x(order[i])) ++j;
    // average rank across the tie run, 1-based
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    const double score = inv_normal_cdf((rank - 0.375) / denom);
    for (std::size_t k = i; k <= j; ++k) z(order[k]) = score;
    i = j + 1;
  }
  return z;
}

double split_rhat(const Eigen::MatrixXd& chains) {
  Eigen::MatrixXd halves = split_chains(chains);
  if (degenerate(halves)) return kNaN;
  double bulk = basic_rhat(rank_normalize(halves));
  Eigen::MatrixXd folded = split_chains(fold(chains));
  double tail = degenerate(folded) ? kNaN : basic_rhat(rank_normalize(folded));
  if (std::isnan(tail)) return bulk;
  return std::max(bulk, tail);
}

double split_ess_bulk(const Eigen::MatrixXd& chains) {
  return basic_ess(rank_normalize(split_chains(chains)));
}

double split_ess_tail(const Eigen::MatrixXd& chains) {
  double lower = basic_ess(split_chains(exceedance(chains, 0.05, false)));
  double upper = basic_ess(split_chains(exceedance(chains, 0.95, true)));
  if (std::isnan(lower) || std::isnan(upper)) return kNaN;
  return std::min(lower, upper);
}

double split_ess_mean(const Eigen::MatrixXd& chains) {
  return basic_ess(split_chains(chains));
}

double ebfmi(const Eigen::VectorXd& energy) {
  const int n = static_cast<int>(energy.size());
  if (n < 3) return kNaN;
  double jumps = 0.0;
  for (int i = 1; i < n; ++i) {
    const double d = energy[i] - energy[i - 1];
    jumps += d * d;
  }
  jumps /= (n - 1.0);
  const double mean = energy.mean();
  const double var = (energy.array() - mean).square().sum() / (n - 1.0);
  if (!(var > 0.0)) return kNaN;
  return jumps / var;
}

const ParamDiag* DiagnosticsReport::worst_rhat() const {
  const ParamDiag* worst = nullptr;
  for (const auto& p : params)
    if (!std::isnan(p.rhat) && (!worst || p.rhat > worst->rhat)) worst = &p;
  return worst;
}

const ParamDiag* DiagnosticsReport::worst_ess_bulk() const {
  const ParamDiag* worst = nullptr;
  for (const auto& p : params)
    if (!std::isnan(p.ess_bulk) && (!worst || p.ess_bulk < worst->ess_bulk)) worst = &p;
  return worst;
}

const ParamDiag* DiagnosticsReport::worst_ess_tail() const {
  const ParamDiag* worst = nullptr;
  for (const auto& p : params)
    if (!std::isnan(p.ess_tail) && (!worst || p.ess_tail < worst->ess_tail)) worst = &p;
  return worst;
}

DiagnosticsReport diagnose(const Draws& d, int max_treedepth) {
  if (d.n_chains < 1 || d.n_iter < 1) throw spec_error("diagnostics require at least one draw");
  DiagnosticsReport report;

  Eigen::MatrixXd chains(d.n_iter, d.n_chains);
  for (std::size_t p = 0; p < d.names.size(); ++p) {
    for (int c = 0; c < d.n_chains; ++c) chains.col(c) = d.chains[c].col(static_cast<int>(p));
    ParamDiag pd;
    pd.name = d.names[p];
    pd.rhat = split_rhat(chains);
    pd.ess_bulk = split_ess_bulk(chains);
    pd.ess_tail = split_ess_tail(chains);
    pd.zero_variance = std::isnan(pd.rhat);
    report.params.push_back(std::move(pd));
  }

  for (int c = 0; c < d.n_chains; ++c) {
    report.n_divergent += static_cast<long>(d.stats[c].col(2).sum());
    report.n_max_treedepth +=
        static_cast<long>((d.stats[c].col(3).array() >= static_cast<double>(max_treedepth)).count());
    double bfmi = ebfmi(d.stats[c].col(1));
    report.ebfmi_per_chain.push_back(bfmi);
    if (bfmi < 0.3) report.low_ebfmi_chains.push_back(c);
  }
  return report;
}

} // namespace dmp
