// Sampler behavior on analytically known targets: moment recovery, chain
// diagnostics, integrator properties, determinism, and the failure modes.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dmpanel/diagnostics.hpp"
#include "dmpanel/logpost.hpp"
#include "dmpanel/nuts.hpp"
#include "dmpanel/rng.hpp"

using namespace dmp;

namespace {

struct StdNormal : LogDensity {
  int d;
  explicit StdNormal(int d) : d(d) {}
  int dim() const override { return d; }
  double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const override {
    g = -q;
    return -0.5 * q.squaredNorm();
  }
};

struct MvNormal : LogDensity {
  Eigen::MatrixXd prec;
  explicit MvNormal(const Eigen::MatrixXd& cov) : prec(cov.inverse()) {}
  int dim() const override { return static_cast<int>(prec.rows()); }
  double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const override {
    g = -prec * q;
    return 0.5 * q.dot(g);
  }
};

// An axis-aligned quadratic bowl with per-coordinate curvature.
struct Quadratic : LogDensity {
  Eigen::VectorXd curv;
  explicit Quadratic(Eigen::VectorXd c) : curv(std::move(c)) {}
  int dim() const override { return static_cast<int>(curv.size()); }
  double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const override {
    g = -curv.cwiseProduct(q);
    return -0.5 * q.dot(curv.cwiseProduct(q));
  }
};

struct NeverFinite : LogDensity {
  int dim() const override { return 2; }
  double value_and_grad(const Eigen::VectorXd&, Eigen::VectorXd& g) const override {
    g.setZero(2);
    return -std::numeric_limits<double>::infinity();
  }
};

// Flat inside a box, impossible outside: free flight never u-turns, so every
// trajectory runs into the wall and registers an infinite energy error.
struct FlatBox : LogDensity {
  double half = 2.0;
  int dim() const override { return 4; }
  double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const override {
    g.setZero(4);
    if (q.cwiseAbs().maxCoeff() > half) return -std::numeric_limits<double>::infinity();
    return 0.0;
  }
};

Eigen::MatrixXd param_matrix(const Draws& d, int p) {
  Eigen::MatrixXd out(d.n_iter, d.n_chains);
  for (int c = 0; c < d.n_chains; ++c) out.col(c) = d.chains[c].col(p);
  return out;
}

double pooled_mean(const Eigen::MatrixXd& x) { return x.mean(); }

double pooled_sd(const Eigen::MatrixXd& x) {
  const double m = x.mean();
  return std::sqrt((x.array() - m).square().sum() / (static_cast<double>(x.size()) - 1.0));
}

bool identical_draws(const Draws& a, const Draws& b) {
  if (a.n_chains != b.n_chains || a.n_iter != b.n_iter || a.names != b.names) return false;
  for (int c = 0; c < a.n_chains; ++c) {
    if (!(a.chains[c].array() == b.chains[c].array()).all()) return false;
    if (!(a.stats[c].array() == b.stats[c].array()).all()) return false;
  }
  return true;
}

std::string conjugate_panel(int N, int T, double mu, double sigma, uint64_t seed) {
  std::ostringstream csv;
  csv << "id,time,y,z\n";
  Rng rng(Rng::derive_key(seed, {17}));
  for (int g = 1; g <= N; ++g)
    for (int t = 1; t <= T; ++t)
      csv << g << ',' << t << ',' << (mu + sigma * rng.normal()) << ',' << rng.normal() << '\n';
  return csv.str();
}

} // namespace

TEST_CASE("configuration limits are enforced") {
  StdNormal target(2);
  SamplerConfig cfg;
  cfg.iter_warmup = 100;
  CHECK_THROWS_WITH_AS(sample(target, cfg), doctest::Contains("iter_warmup"), Error);
  cfg.iter_warmup = 150;
  cfg.chains = 0;
  CHECK_THROWS_AS(sample(target, cfg), Error);
  cfg.chains = 1;
  cfg.iter_sampling = 0;
  CHECK_THROWS_AS(sample(target, cfg), Error);
  cfg.iter_sampling = 10;
  cfg.target_accept = 1.0;
  CHECK_THROWS_AS(sample(target, cfg), Error);
  cfg.target_accept = 0.8;
  cfg.max_treedepth = 0;
  CHECK_THROWS_AS(sample(target, cfg), Error);
  cfg.max_treedepth = 10;
  cfg.init_radius = 0.0;
  CHECK_THROWS_AS(sample(target, cfg), Error);
}

TEST_CASE("standard normal target: means within 4 mcse, rhat under 1.01") {
  StdNormal target(5);
  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.iter_warmup = 1000;
  cfg.iter_sampling = 1000;
  cfg.seed = 20240817;
  Warnings warn;
  Draws d = sample(target, cfg, &warn);

  REQUIRE(d.n_chains == 4);
  REQUIRE(d.n_iter == 1000);
  REQUIRE(d.names.size() == 5);
  CHECK(d.names[0] == "q[1]");

  for (int p = 0; p < 5; ++p) {
    Eigen::MatrixXd x = param_matrix(d, p);
    const double mcse = pooled_sd(x) / std::sqrt(split_ess_mean(x));
    CHECK(std::abs(pooled_mean(x)) < 4.0 * mcse);
    CHECK(split_rhat(x) < 1.01);
    CHECK(pooled_sd(x) == doctest::Approx(1.0).epsilon(0.1));
  }

  long divergent = 0;
  for (int c = 0; c < 4; ++c) divergent += static_cast<long>(d.stats[c].col(2).sum());
  CHECK(divergent == 0);
  // dual averaging should land in a sane acceptance region
  double acc = 0.0;
  for (int c = 0; c < 4; ++c) acc += d.stats[c].col(6).mean() / 4.0;
  CHECK(acc > 0.6);
  CHECK(acc <= 1.0);
  // step size is frozen after warmup
  CHECK(d.stats[0].col(5).minCoeff() == d.stats[0].col(5).maxCoeff());
  CHECK(warn.empty());
}

TEST_CASE("correlated 10-d gaussian covariance within 10% frobenius error") {
  const int k = 10;
  Eigen::MatrixXd cov(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double si = 1.0 + 0.1 * i, sj = 1.0 + 0.1 * j;
      cov(i, j) = si * sj * std::pow(0.7, std::abs(i - j));
    }
  MvNormal target(cov);
  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.iter_warmup = 1000;
  cfg.iter_sampling = 2000;
  cfg.seed = 99;
  Draws d = sample(target, cfg);

  const double total = static_cast<double>(d.n_chains) * d.n_iter;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  for (int c = 0; c < d.n_chains; ++c) mean += d.chains[c].colwise().sum().transpose();
  mean /= total;
  Eigen::MatrixXd sample_cov = Eigen::MatrixXd::Zero(k, k);
  for (int c = 0; c < d.n_chains; ++c) {
    Eigen::MatrixXd centered = d.chains[c].rowwise() - mean.transpose();
    sample_cov += centered.transpose() * centered;
  }
  sample_cov /= total - 1.0;

  const double rel = (sample_cov - cov).norm() / cov.norm();
  CHECK(rel < 0.10);
}

TEST_CASE("fixed seed reproduces draws bit for bit, regardless of cores") {
  StdNormal target(3);
  SamplerConfig cfg;
  cfg.chains = 3;
  cfg.iter_warmup = 200;
  cfg.iter_sampling = 150;
  cfg.seed = 31337;
  Draws a = sample(target, cfg);
  Draws b = sample(target, cfg);
  CHECK(identical_draws(a, b));

  cfg.cores = 3;
  Draws c = sample(target, cfg);
  CHECK(identical_draws(a, c));

  cfg.cores = 1;
  cfg.seed = 31338;
  Draws e = sample(target, cfg);
  CHECK_FALSE(identical_draws(a, e));
}

TEST_CASE("leapfrog is reversible and volume preserving on quadratics") {
  Eigen::VectorXd curv(3);
  curv << 1.0, 4.0, 0.25;
  Quadratic target(curv);
  Eigen::VectorXd inv_metric(3);
  inv_metric << 0.9, 0.5, 2.0;

  Eigen::VectorXd q0(3), p0(3);
  q0 << 0.3, -1.1, 0.7;
  p0 << -0.2, 0.8, 1.5;

  auto kinetic = [&](const Eigen::VectorXd& p) { return 0.5 * p.dot(inv_metric.cwiseProduct(p)); };

  SUBCASE("reversal reproduces the start to 1e-10") {
    Eigen::VectorXd q = q0, p = p0, g;
    double lp = target.value_and_grad(q, g);
    for (int i = 0; i < 64; ++i) lp = leapfrog_step(target, inv_metric, 0.05, q, p, g);
    p = -p;
    for (int i = 0; i < 64; ++i) lp = leapfrog_step(target, inv_metric, 0.05, q, p, g);
    CHECK((q - q0).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((p + p0).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(lp == doctest::Approx(target.value_and_grad(q0, g)).epsilon(1e-12));
  }

  SUBCASE("energy error scales as eps^2") {
    auto energy_error = [&](double eps) {
      Eigen::VectorXd q = q0, p = p0, g;
      double lp = target.value_and_grad(q, g);
      const double h0 = -lp + kinetic(p);
      const int steps = static_cast<int>(std::lround(4.0 / eps));
      double worst = 0.0;
      for (int i = 0; i < steps; ++i) {
        lp = leapfrog_step(target, inv_metric, eps, q, p, g);
        worst = std::max(worst, std::abs(-lp + kinetic(p) - h0));
      }
      return worst;
    };
    const double e1 = energy_error(0.08);
    const double e2 = energy_error(0.04);
    const double e3 = energy_error(0.02);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.35));
    CHECK(e2 / e3 == doctest::Approx(4.0).epsilon(0.35));
  }

  SUBCASE("the phase-space map has unit determinant") {
    // the map is linear for quadratic potentials, so columns of the Jacobian
    // come from propagating basis vectors exactly
    const int n = 3;
    Eigen::MatrixXd jac(2 * n, 2 * n);
    for (int col = 0; col < 2 * n; ++col) {
      Eigen::VectorXd q = Eigen::VectorXd::Zero(n), p = Eigen::VectorXd::Zero(n), g;
      if (col < n)
        q[col] = 1.0;
      else
        p[col - n] = 1.0;
      target.value_and_grad(q, g);
      for (int i = 0; i < 5; ++i) leapfrog_step(target, inv_metric, 0.21, q, p, g);
      jac.block(0, col, n, 1) = q;
      jac.block(n, col, n, 1) = p;
    }
    CHECK(std::abs(jac.determinant() - 1.0) < 1e-10);
  }
}

TEST_CASE("conjugate normal-normal panel matches the closed form") {
  // one global mean with a normal prior, gaussian noise with known sd:
  // prior N(mu0, tau0^2), n observations -> posterior
  // N((mu0/tau0^2 + n*ybar/sigma^2) / (1/tau0^2 + n/sigma^2), 1/(1/tau0^2 + n/sigma^2))
  const int N = 30, T = 5;
  const double sigma = 1.3, mu0 = 0.7, tau0 = 0.8;
  std::string csv = conjugate_panel(N, T, 1.9, sigma, 2024);
  PanelData panel = panel_from_csv(csv, "time", "id");

  struct Conjugate : LogDensity {
    std::vector<double> y;
    double sigma, mu0, tau0;
    int dim() const override { return 1; }
    double value_and_grad(const Eigen::VectorXd& q, Eigen::VectorXd& g) const override {
      const double th = q[0];
      double lp = -0.5 * (th - mu0) * (th - mu0) / (tau0 * tau0);
      double grad = -(th - mu0) / (tau0 * tau0);
      for (double v : y) {
        lp += -0.5 * (v - th) * (v - th) / (sigma * sigma);
        grad += (v - th) / (sigma * sigma);
      }
      g.resize(1);
      g[0] = grad;
      return lp;
    }
  } target;
  target.sigma = sigma;
  target.mu0 = mu0;
  target.tau0 = tau0;
  for (int g = 0; g < panel.N(); ++g)
    for (int t = 0; t < panel.T(); ++t) target.y.push_back(panel.value("y", g, t));

  const double n = static_cast<double>(target.y.size());
  double ybar = 0.0;
  for (double v : target.y) ybar += v / n;
  const double prec = 1.0 / (tau0 * tau0) + n / (sigma * sigma);
  const double post_mean = (mu0 / (tau0 * tau0) + n * ybar / (sigma * sigma)) / prec;
  const double post_sd = std::sqrt(1.0 / prec);

  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.iter_warmup = 500;
  cfg.iter_sampling = 1000;
  cfg.seed = 5;
  Draws d = sample(target, cfg);
  Eigen::MatrixXd x = param_matrix(d, 0);
  const double ess = split_ess_mean(x);
  const double mcse_mean = pooled_sd(x) / std::sqrt(ess);
  const double mcse_sd = post_sd / std::sqrt(2.0 * (ess - 1.0));
  CHECK(std::abs(pooled_mean(x) - post_mean) < 3.0 * mcse_mean);
  CHECK(std::abs(pooled_sd(x) - post_sd) < 3.0 * mcse_sd);
}

TEST_CASE("initialization failure raises after 100 attempts") {
  NeverFinite target;
  SamplerConfig cfg;
  cfg.chains = 1;
  cfg.iter_warmup = 150;
  cfg.iter_sampling = 10;
  CHECK_THROWS_WITH_AS(sample(target, cfg), doctest::Contains("initialize"), Error);
}

TEST_CASE("a wall-bounded flat target makes every warmup iteration diverge") {
  FlatBox target;
  SamplerConfig cfg;
  cfg.chains = 1;
  cfg.iter_warmup = 150;
  cfg.iter_sampling = 10;
  cfg.seed = 12;
  CHECK_THROWS_WITH_AS(sample(target, cfg), doctest::Contains("diverged"), Error);
}

TEST_CASE("a small gaussian panel model samples cleanly end to end") {
  // y carries a linear signal in z so the coefficient is identified
  std::ostringstream rebuilt;
  rebuilt << "id,time,y,z\n";
  Rng rng(Rng::derive_key(31, {9}));
  for (int g = 1; g <= 20; ++g)
    for (int t = 1; t <= 8; ++t) {
      const double z = rng.normal();
      rebuilt << g << ',' << t << ',' << (1.5 * z + 0.5 * rng.normal()) << ',' << z << '\n';
    }

  auto f = parse_formula("obs(y ~ -1 + z, family = \"gaussian\")");
  DesignSet ds = build_design(f, panel_from_csv(rebuilt.str(), "time", "id"));
  ParamLayout lay = ParamLayout::build(ds);
  PosteriorModel model(lay, default_priors(ds));

  SamplerConfig cfg;
  cfg.chains = 2;
  cfg.iter_warmup = 300;
  cfg.iter_sampling = 300;
  cfg.seed = 61;
  Draws d = sample(model, cfg);
  REQUIRE(d.names == std::vector<std::string>{"beta_y_z", "sigma_y"});

  Eigen::MatrixXd beta = param_matrix(d, 0);
  Eigen::MatrixXd sig = param_matrix(d, 1);
  CHECK(split_rhat(beta) < 1.05);
  CHECK(split_rhat(sig) < 1.05);
  CHECK(pooled_mean(beta) == doctest::Approx(1.5).epsilon(0.05));
  CHECK(pooled_mean(sig) == doctest::Approx(0.5).epsilon(0.1));
  CHECK(sig.minCoeff() > 0.0);
  for (int c = 0; c < d.n_chains; ++c) {
    CHECK(d.stats[c].col(0).maxCoeff() < 0.0); // lp of a continuous model
    CHECK(std::isfinite(d.stats[c].col(1).mean()));
    CHECK(d.stats[c].col(3).minCoeff() >= 1.0);
    CHECK(d.stats[c].col(4).minCoeff() >= 1.0);
    CHECK(d.elapsed_seconds[c] >= 0.0);
  }
}
