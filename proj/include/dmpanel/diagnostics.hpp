#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpanel/nuts.hpp"

namespace dmp {

/// Inverse standard-normal CDF (Wichura's PPND16 rational approximations),
/// accurate to ~1e-15 over (0, 1).
double inv_normal_cdf(double p);

/// Linear-interpolation (type 7) sample quantile; sorts a copy.
double quantile_type7(std::vector<double> xs, double p);

/// Biased autocovariance (1/N) * sum (y_i - mean)(y_{i+t} - mean) for
/// t = 0..N-1, computed with a zero-padded radix-2 FFT.
std::vector<double> autocovariance_fft(const Eigen::VectorXd& y);

/// Splits chains for diagnostics: each column is halved (first and last
/// floor(n/2) draws), except a single chain which is cut into quarters so
/// that between-segment variance is still measurable. Throws when a segment
/// would hold fewer than 8 draws.
Eigen::MatrixXd split_chains(const Eigen::MatrixXd& chains);

/// Replaces draws by normal scores of their pooled average ranks
/// (Blom offset (r - 3/8)/(S + 1/4)).
Eigen::MatrixXd rank_normalize(const Eigen::MatrixXd& x);

/// Rank-normalized split-Rhat: the larger of the bulk statistic and the
/// statistic on absolute deviations from the pooled median. NaN when the
/// pooled draws are constant. Input is (iterations x chains), unsplit.
double split_rhat(const Eigen::MatrixXd& chains);

/// Effective sample sizes following the rank-normalization recipe: bulk on
/// normal scores, tail as the smaller ESS of the 5% / 95% exceedance
/// indicators, mean on the raw draws (for Monte Carlo standard errors).
/// All split chains first; all capped at m*n*log10(m*n).
double split_ess_bulk(const Eigen::MatrixXd& chains);
double split_ess_tail(const Eigen::MatrixXd& chains);
double split_ess_mean(const Eigen::MatrixXd& chains);

/// Energy Bayesian fraction of missing information for one chain's energy
/// series: mean squared energy jump over energy variance.
double ebfmi(const Eigen::VectorXd& energy);

struct ParamDiag {
  std::string name;
  double rhat = 0.0;
  double ess_bulk = 0.0;
  double ess_tail = 0.0;
  bool zero_variance = false;
};

struct DiagnosticsReport {
  std::vector<ParamDiag> params;
  long n_divergent = 0;
  long n_max_treedepth = 0;
  std::vector<double> ebfmi_per_chain;
  std::vector<int> low_ebfmi_chains; // indices with E-BFMI below 0.3

  const ParamDiag* worst_rhat() const;
  const ParamDiag* worst_ess_bulk() const;
  const ParamDiag* worst_ess_tail() const;
};

/// Per-parameter convergence measures plus sampler-event counts for a full
/// set of draws. max_treedepth is the configured cap, used to count
/// saturated trajectories.
DiagnosticsReport diagnose(const Draws& d, int max_treedepth = 10);

} // namespace dmp
