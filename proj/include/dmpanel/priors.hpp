#pragma once

#include <string>
#include <vector>

#include "dmpanel/design.hpp"

namespace dmp {

enum class PriorDist { normal, exponential, student_t, lkj };

/// One row of the prior table: a sampled parameter group, the channel it
/// belongs to, and its prior literal.
struct PriorSpec {
  std::string parameter;            // beta_y_z, alpha_y, corr_nu, ...
  std::string response;             // owning channel; empty for corr_nu
  PriorDist dist = PriorDist::normal;
  std::vector<double> args;         // normal {mu,sd}; exponential {rate};
                                    // student_t {nu,mu,sd}; lkj {eta}
  std::string type;                 // alpha|beta|delta|tau|tau_alpha|sigma|
                                    // sigma_nu|phi|corr_nu
  std::string category;             // categorical channels only
};

/// Parse "normal(0, 6.1)" style literals; throws on malformed input.
void parse_prior_literal(const std::string& text, PriorSpec& out);
std::string print_prior_literal(const PriorSpec& p);

/// Log density of the literal at x with d/dx; lkj is structural and has no
/// scalar density (throws).
double prior_logpdf(const PriorSpec& p, double x, double* dx);

/// Data-scaled weakly-informative defaults, one row per sampled parameter
/// group, ordered per channel as sigma_nu_*, alpha, tau_alpha, beta_*,
/// delta_*, tau_*, sigma/phi, with corr_nu last.
std::vector<PriorSpec> default_priors(const DesignSet& ds);

std::string priors_to_csv(const std::vector<PriorSpec>& priors);
std::vector<PriorSpec> priors_from_csv(const std::string& text);

/// Replace matching defaults with user rows; rows are keyed by parameter
/// name and must refer to parameters the model actually has.
std::vector<PriorSpec> apply_prior_overrides(std::vector<PriorSpec> defaults,
                                             const std::vector<PriorSpec>& user);

} // namespace dmp
