#include "dmpanel/families.hpp"

#include <algorithm>
#include <cmath>

#include "dmpanel/common.hpp"

namespace dmp {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

// log(1 + exp(x)) without overflow
double log1pexp(double x) {
  if (x > 33.0) return x;
  if (x < -37.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

double digamma(double x) {
  // recurrence up to x >= 10, then the standard asymptotic expansion
  double result = 0.0;
  while (x < 10.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 -
                    inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return result;
}

bool family_has_aux(Family family) {
  switch (family) {
    case Family::gaussian:
    case Family::negbin:
    case Family::gamma_dist:
    case Family::beta:
      return true;
    default:
      return false;
  }
}

FamilyLogpdf family_logpdf(Family family, double y, double eta, double aux,
                           double extra) {
  FamilyLogpdf out;
  switch (family) {
    case Family::gaussian: {
      const double sigma = aux;
      const double z = (y - eta) / sigma;
      out.value = -0.5 * kLogTwoPi - std::log(sigma) - 0.5 * z * z;
      out.d_eta = z / sigma;
      out.d_aux = (z * z - 1.0) / sigma;
      return out;
    }
    case Family::poisson: {
      const double lambda = std::exp(eta);
      out.value = y * eta - lambda - std::lgamma(y + 1.0);
      out.d_eta = y - lambda;
      return out;
    }
    case Family::negbin: {
      // NegBinomial2: mean mu, variance mu + mu^2 / phi
      const double mu = std::exp(eta);
      const double phi = aux;
      out.value = std::lgamma(y + phi) - std::lgamma(phi) -
                  std::lgamma(y + 1.0) + phi * std::log(phi / (phi + mu)) +
                  y * (eta - std::log(phi + mu));
      out.d_eta = y - mu * (y + phi) / (phi + mu);
      out.d_aux = digamma(y + phi) - digamma(phi) +
                  std::log(phi / (phi + mu)) + 1.0 - (y + phi) / (phi + mu);
      return out;
    }
    case Family::bernoulli: {
      out.value = y * eta - log1pexp(eta);
      out.d_eta = y - logistic(eta);
      return out;
    }
    case Family::binomial: {
      const double n = extra;
      out.value = std::lgamma(n + 1.0) - std::lgamma(y + 1.0) -
                  std::lgamma(n - y + 1.0) + y * eta - n * log1pexp(eta);
      out.d_eta = y - n * logistic(eta);
      return out;
    }
    case Family::exponential: {
      // log link on the mean, so the rate is exp(-eta)
      out.value = -eta - y * std::exp(-eta);
      out.d_eta = -1.0 + y * std::exp(-eta);
      return out;
    }
    case Family::gamma_dist: {
      // shape phi, rate phi / mu
      const double phi = aux;
      const double mu = std::exp(eta);
      out.value = phi * (std::log(phi) - eta) - std::lgamma(phi) +
                  (phi - 1.0) * std::log(y) - phi * y / mu;
      out.d_eta = phi * (y / mu - 1.0);
      out.d_aux = std::log(phi) + 1.0 - eta - digamma(phi) + std::log(y) -
                  y / mu;
      return out;
    }
    case Family::beta: {
      // mean mu = logistic(eta), precision phi
      const double phi = aux;
      const double mu = logistic(eta);
      const double a = mu * phi;
      const double b = (1.0 - mu) * phi;
      out.value = std::lgamma(phi) - std::lgamma(a) - std::lgamma(b) +
                  (a - 1.0) * std::log(y) + (b - 1.0) * std::log1p(-y);
      const double d_mu =
          phi * (digamma(b) - digamma(a) + std::log(y) - std::log1p(-y));
      out.d_eta = d_mu * mu * (1.0 - mu);
      out.d_aux = digamma(phi) - mu * digamma(a) - (1.0 - mu) * digamma(b) +
                  mu * std::log(y) + (1.0 - mu) * std::log1p(-y);
      return out;
    }
    case Family::categorical:
      throw spec_error("categorical density needs the vector overload");
    case Family::deterministic:
      throw spec_error("deterministic channels have no density");
  }
  return out;
}

double family_mean(Family family, double eta, double extra) {
  switch (family) {
    case Family::gaussian: return eta;
    case Family::poisson:
    case Family::negbin:
    case Family::exponential:
    case Family::gamma_dist: return std::exp(eta);
    case Family::bernoulli:
    case Family::beta: return logistic(eta);
    case Family::binomial: return extra * logistic(eta);
    default:
      throw spec_error("no scalar mean for this family");
  }
}

double family_draw(Rng& rng, Family family, double eta, double aux,
                   double extra) {
  switch (family) {
    case Family::gaussian:
      return eta + aux * rng.normal();
    case Family::poisson:
      return static_cast<double>(rng.poisson(std::exp(eta)));
    case Family::negbin: {
      // gamma-poisson mixture with mean exp(eta), dispersion phi
      const double lambda = rng.gamma(aux, std::exp(eta) / aux);
      return static_cast<double>(rng.poisson(lambda));
    }
    case Family::bernoulli:
      return rng.bernoulli(logistic(eta)) ? 1.0 : 0.0;
    case Family::binomial:
      return static_cast<double>(
          rng.binomial(static_cast<long long>(extra), logistic(eta)));
    case Family::exponential:
      return rng.exponential(std::exp(-eta));
    case Family::gamma_dist:
      return rng.gamma(aux, std::exp(eta) / aux);
    case Family::beta: {
      const double mu = logistic(eta);
      return rng.beta(mu * aux, (1.0 - mu) * aux);
    }
    default:
      throw spec_error("no scalar draw for this family");
  }
}

void categorical_probs(const std::vector<double>& eta, std::vector<double>& p) {
  const size_t L = eta.size() + 1;
  p.resize(L);
  double mx = 0.0; // reference logit
  for (double e : eta) mx = std::max(mx, e);
  double sum = std::exp(-mx);
  p[0] = std::exp(-mx);
  for (size_t l = 1; l < L; ++l) {
    p[l] = std::exp(eta[l - 1] - mx);
    sum += p[l];
  }
  for (size_t l = 0; l < L; ++l) p[l] /= sum;
}

double categorical_logpdf(int y, const std::vector<double>& eta,
                          std::vector<double>* d_eta) {
  const int L = static_cast<int>(eta.size()) + 1;
  double mx = 0.0;
  for (double e : eta) mx = std::max(mx, e);
  double sum = std::exp(-mx);
  for (double e : eta) sum += std::exp(e - mx);
  const double lse = mx + std::log(sum);
  const double value = (y == 0 ? 0.0 : eta[y - 1]) - lse;
  if (d_eta) {
    d_eta->resize(L - 1);
    for (int l = 1; l < L; ++l) {
      const double p = std::exp(eta[l - 1] - lse);
      (*d_eta)[l - 1] = (y == l ? 1.0 : 0.0) - p;
    }
  }
  return value;
}

int categorical_draw(Rng& rng, const std::vector<double>& eta) {
  std::vector<double> p;
  categorical_probs(eta, p);
  double u = rng.u01();
  for (size_t l = 0; l < p.size(); ++l) {
    u -= p[l];
    if (u < 0.0) return static_cast<int>(l);
  }
  return static_cast<int>(p.size()) - 1;
}

} // namespace dmp
