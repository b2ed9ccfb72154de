#pragma once

#include <Eigen/Dense>

#include "dmpanel/formula.hpp"

namespace dmp {

/// B-spline basis over time positions 1..T: clamped boundary knots (degree+1
/// repeats at 1 and T) and equally spaced interior knots, D = df columns.
struct SplineBasis {
  Eigen::MatrixXd B; // T x D
  int df = 0;
  int degree = 0;
};

/// The full clamped knot vector used by build_spline_basis, exposed so tests
/// can evaluate the same basis with an independent algorithm.
std::vector<double> spline_knots(int T, const SplinesConfig& cfg);

SplineBasis build_spline_basis(int T, const SplinesConfig& cfg);

} // namespace dmp
