#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dmpanel/spline.hpp"

using namespace dmp;

namespace {

// independent oracle: textbook Cox-de Boor recursion evaluated for every
// basis index, with the half-open convention and closed right boundary
double cox_de_boor(const std::vector<double>& U, int i, int p, double x,
                   double right_end) {
  if (p == 0) {
    if (U[i] <= x && x < U[i + 1]) return 1.0;
    if (x == right_end && U[i] < U[i + 1] && x == U[i + 1]) return 1.0;
    return 0.0;
  }
  double a = 0.0, b = 0.0;
  if (U[i + p] != U[i]) {
    a = (x - U[i]) / (U[i + p] - U[i]) * cox_de_boor(U, i, p - 1, x, right_end);
  }
  if (U[i + p + 1] != U[i + 1]) {
    b = (U[i + p + 1] - x) / (U[i + p + 1] - U[i + 1]) *
        cox_de_boor(U, i + 1, p - 1, x, right_end);
  }
  return a + b;
}

} // namespace

TEST_CASE("matches the naive recursion across shapes") {
  struct Case { int T; int df; int degree; };
  for (const Case c : {Case{30, 10, 3}, Case{20, 6, 2}, Case{8, 8, 3},
                       Case{12, 5, 1}, Case{15, 4, 3}, Case{9, 9, 0}}) {
    CAPTURE(c.T);
    CAPTURE(c.df);
    SplinesConfig cfg;
    cfg.df = c.df;
    cfg.degree = c.degree;
    auto basis = build_spline_basis(c.T, cfg);
    REQUIRE(basis.B.rows() == c.T);
    REQUIRE(basis.B.cols() == c.df);
    const auto U = spline_knots(c.T, cfg);
    for (int t = 0; t < c.T; ++t) {
      for (int j = 0; j < c.df; ++j) {
        const double expect =
            cox_de_boor(U, j, c.degree, 1.0 + t, static_cast<double>(c.T));
        CHECK(basis.B(t, j) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("rows are a partition of unity with bounded support") {
  SplinesConfig cfg;
  cfg.df = 10;
  auto basis = build_spline_basis(30, cfg);
  for (int t = 0; t < 30; ++t) {
    CHECK(std::abs(basis.B.row(t).sum() - 1.0) < 1e-10);
    int nonzeros = 0;
    for (int j = 0; j < 10; ++j) {
      CHECK(basis.B(t, j) >= 0.0);
      CHECK(basis.B(t, j) <= 1.0);
      if (basis.B(t, j) != 0.0) ++nonzeros;
    }
    CHECK(nonzeros <= cfg.degree + 1);
  }
}

TEST_CASE("first row isolates the first coefficient") {
  SplinesConfig cfg;
  cfg.df = 7;
  auto basis = build_spline_basis(25, cfg);
  CHECK(basis.B(0, 0) == doctest::Approx(1.0));
  for (int j = 1; j < 7; ++j) CHECK(basis.B(0, j) == doctest::Approx(0.0));
  // clamped right boundary mirrors it
  CHECK(basis.B(24, 6) == doctest::Approx(1.0));
}

TEST_CASE("degree zero with df equal to T is an indicator basis") {
  SplinesConfig cfg;
  cfg.df = 6;
  cfg.degree = 0;
  auto basis = build_spline_basis(6, cfg);
  for (int t = 0; t < 6; ++t) {
    for (int j = 0; j < 6; ++j) {
      CHECK(basis.B(t, j) == doctest::Approx(t == j ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("interior cubic columns match the closed-form uniform B-spline") {
  // with df = T - 2 and degree 3 the knot spacing is exactly 1, so interior
  // columns are shifted copies of the classic uniform cubic kernel
  const int T = 22;
  SplinesConfig cfg;
  cfg.df = T - 2; // interior = df - 4 = 16, spacing (T-1)/17 = 21/17... pick exact
  auto u_cubic = [](double u) {
    if (u < 0.0 || u >= 4.0) return 0.0;
    if (u < 1.0) return u * u * u / 6.0;
    if (u < 2.0) return (-3 * u * u * u + 12 * u * u - 12 * u + 4) / 6.0;
    if (u < 3.0) return (3 * u * u * u - 24 * u * u + 60 * u - 44) / 6.0;
    const double w = 4.0 - u;
    return w * w * w / 6.0;
  };
  // choose T and df so the interior spacing is exactly 1: interior+1 = T-1
  // means interior = T-2 and df = interior + degree + 1 = T + 2 > T, so use a
  // direct check at spacing h: evaluate a middle column against the kernel
  cfg.df = 10;
  const int TT = 30;
  auto basis = build_spline_basis(TT, cfg);
  const auto U = spline_knots(TT, cfg);
  const double h = U[5] - U[4]; // uniform interior spacing
  // column 5's support starts at U[5] and spans 4 uniform intervals
  for (int t = 0; t < TT; ++t) {
    const double x = 1.0 + t;
    if (x < U[5] || x > U[9]) continue;
    CHECK(basis.B(t, 5) == doctest::Approx(u_cubic((x - U[5]) / h)).epsilon(1e-10));
  }
}

TEST_CASE("df out of range is rejected") {
  SplinesConfig cfg;
  cfg.df = 10;
  CHECK_THROWS_AS(build_spline_basis(8, cfg), Error);
  cfg.df = 3;
  cfg.degree = 3;
  CHECK_THROWS_AS(build_spline_basis(8, cfg), Error);
}
