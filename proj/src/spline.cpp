#include "dmpanel/spline.hpp"

#include "dmpanel/common.hpp"

namespace dmp {

std::vector<double> spline_knots(int T, const SplinesConfig& cfg) {
  const int D = cfg.df;
  const int p = cfg.degree;
  const int interior = D - p - 1;
  std::vector<double> knots;
  knots.reserve(D + p + 1);
  for (int i = 0; i <= p; ++i) knots.push_back(1.0);
  for (int j = 1; j <= interior; ++j) {
    knots.push_back(1.0 + (T - 1.0) * j / (interior + 1.0));
  }
  for (int i = 0; i <= p; ++i) knots.push_back(static_cast<double>(T));
  return knots;
}

SplineBasis build_spline_basis(int T, const SplinesConfig& cfg) {
  const int D = cfg.df;
  const int p = cfg.degree;
  if (D > T) {
    throw spec_error("splines df (" + std::to_string(D) +
                     ") cannot exceed the number of time points (" +
                     std::to_string(T) + ")");
  }
  if (D <= p) throw spec_error("splines df must exceed the degree");
  const std::vector<double> U = spline_knots(T, cfg);

  SplineBasis basis;
  basis.df = D;
  basis.degree = p;
  basis.B = Eigen::MatrixXd::Zero(T, D);

  std::vector<double> N(p + 1), left(p + 1), right(p + 1);
  for (int t = 0; t < T; ++t) {
    const double x = 1.0 + t;
    // locate the knot span [U[span], U[span+1]) containing x; the right
    // boundary belongs to the last non-degenerate span
    int span = p;
    while (span < D - 1 && x >= U[span + 1]) ++span;
    // triangular evaluation of the p+1 basis functions alive on this span
    N[0] = 1.0;
    for (int j = 1; j <= p; ++j) {
      left[j] = x - U[span + 1 - j];
      right[j] = U[span + j] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double denom = right[r + 1] + left[j - r];
        const double tmp = denom != 0.0 ? N[r] / denom : 0.0;
        N[r] = saved + right[r + 1] * tmp;
        saved = left[j - r] * tmp;
      }
      N[j] = saved;
    }
    for (int j = 0; j <= p; ++j) basis.B(t, span - p + j) = N[j];
  }
  return basis;
}

} // namespace dmp
