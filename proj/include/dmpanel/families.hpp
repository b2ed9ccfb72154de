#pragma once

#include <vector>

#include "dmpanel/formula.hpp"
#include "dmpanel/rng.hpp"

namespace dmp {

/// Log density of one observation with partial derivatives. `d_eta` is with
/// respect to the linear predictor (offset already folded in), `d_aux` with
/// respect to the family's auxiliary parameter on its constrained scale
/// (gaussian sd, negbin/beta/gamma phi); zero for families without one.
struct FamilyLogpdf {
  double value = 0.0;
  double d_eta = 0.0;
  double d_aux = 0.0;
};

/// `extra` carries the binomial trial count; ignored elsewhere.
FamilyLogpdf family_logpdf(Family family, double y, double eta,
                           double aux = 0.0, double extra = 0.0);

/// Mean of the response implied by eta (inverse link); binomial returns the
/// per-trial probability times `extra` trials.
double family_mean(Family family, double eta, double extra = 0.0);

/// One simulated response at the given linear predictor.
double family_draw(Rng& rng, Family family, double eta, double aux = 0.0,
                   double extra = 0.0);

/// Categorical with L classes: logits (0, eta[0], ..., eta[L-2]) with the
/// first class as reference. d_eta (size L-1) is filled when non-null.
double categorical_logpdf(int y, const std::vector<double>& eta,
                          std::vector<double>* d_eta);
int categorical_draw(Rng& rng, const std::vector<double>& eta);
void categorical_probs(const std::vector<double>& eta, std::vector<double>& p);

bool family_has_aux(Family family);

/// digamma(x), needed for negbin/gamma/beta gradients.
double digamma(double x);

} // namespace dmp
