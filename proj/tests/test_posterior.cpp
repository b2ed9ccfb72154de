#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dmpanel/fitio.hpp"
#include "dmpanel/posterior.hpp"
#include "dmpanel/rng.hpp"

using namespace dmp;

namespace {

std::string gaussian_panel(int N = 8, int T = 12) {
  std::ostringstream csv;
  csv << "id,time,y,z,x\n";
  Rng rng(Rng::derive_key(404, {0}));
  for (int g = 1; g <= N; ++g) {
    for (int t = 1; t <= T; ++t) {
      csv << g << ',' << t << ',' << rng.normal() << ',' << rng.normal()
          << ',' << rng.normal() << '\n';
    }
  }
  return csv.str();
}

// one channel exercising every time-varying piece: varying intercept and
// slopes, random intercept, splines
DesignSet gaussian_design() {
  auto f = parse_formula(
      "obs(y ~ -1 + z + varying(~ x + lag(y)) + random(~1), family = "
      "\"gaussian\") + splines(df = 6)");
  return build_design(f, panel_from_csv(gaussian_panel(), "time", "id"));
}

// two channels over string group ids: correlated two-column random effects
// on y plus a categorical channel, so corr_nu and category suffixes appear
DesignSet mixed_design() {
  std::ostringstream csv;
  csv << "unit,time,y,c,z\n";
  Rng rng(Rng::derive_key(77, {1}));
  const char* levels[3] = {"lo", "mid", "hi"};
  const char* units[5] = {"fin", "swe", "nor", "den", "isl"};
  for (int g = 0; g < 5; ++g) {
    for (int t = 1; t <= 9; ++t) {
      csv << units[g] << ',' << t << ',' << rng.normal() << ','
          << levels[(g + t) % 3] << ',' << rng.normal() << '\n';
    }
  }
  auto f = parse_formula(
      "obs(y ~ z + random(~1 + z), family = \"gaussian\") + "
      "obs(c ~ z, family = \"categorical\")");
  return build_design(f, panel_from_csv(csv.str(), "time", "unit"));
}

Draws fake_draws(const ParamLayout& lay, int n_chains, int n_iter,
                 uint64_t seed = 5150) {
  Draws d;
  d.n_chains = n_chains;
  d.n_iter = n_iter;
  d.names = lay.constrained_names();
  const int P = static_cast<int>(d.names.size());
  Rng rng(Rng::derive_key(seed, {3}));
  for (int c = 0; c < n_chains; ++c) {
    Eigen::MatrixXd m(n_iter, P);
    Eigen::MatrixXd s(n_iter, 7);
    for (int i = 0; i < n_iter; ++i) {
      for (int p = 0; p < P; ++p) m(i, p) = 0.5 * p + rng.normal();
      s(i, 0) = -40.0 + rng.normal();      // lp__
      s(i, 1) = 45.0 + rng.normal();       // energy__
      s(i, 2) = 0.0;                       // divergent__
      s(i, 3) = 3.0;                       // treedepth__
      s(i, 4) = 7.0;                       // n_leapfrog__
      s(i, 5) = 0.25;                      // stepsize__
      s(i, 6) = 0.9;                       // accept__
    }
    d.chains.push_back(m);
    d.stats.push_back(s);
    d.warmup_seconds.push_back(1.5);
    d.sample_seconds.push_back(2.5);
    d.elapsed_seconds.push_back(4.0);
  }
  return d;
}

std::vector<std::string> table_params(const ExtractTable& t) {
  std::set<std::string> uniq(t.parameter.begin(), t.parameter.end());
  return {uniq.begin(), uniq.end()};
}

} // namespace

TEST_CASE("parameter names round trip through parse") {
  for (auto* make : {gaussian_design, mixed_design}) {
    auto ds = make();
    auto lay = ParamLayout::build(ds);
    for (const auto& e : lay.registry()) {
      auto pn = parse_parameter_name(e.name, lay.registry());
      CHECK(pn.render() == e.name);
      CHECK(pn.type == e.type);
      CHECK(pn.response == e.response);
    }
  }

  auto lay = ParamLayout::build(gaussian_design());
  auto pn = parse_parameter_name("delta_y_x[3]", lay.registry());
  CHECK(pn.type == "delta");
  CHECK(pn.response == "y");
  CHECK(pn.predictor == "x");
  CHECK(pn.index == 3);
  pn = parse_parameter_name("nu_y_alpha_id5", lay.registry());
  CHECK(pn.group == "id5");
  pn = parse_parameter_name("tau_y_y_lag1", lay.registry());
  CHECK(pn.predictor == "y_lag1");

  auto mixed = ParamLayout::build(mixed_design());
  pn = parse_parameter_name("corr_nu_y_alpha_y_z", mixed.registry());
  CHECK(pn.type == "corr_nu");
  CHECK(pn.render() == "corr_nu_y_alpha_y_z");
  // first level to appear ("mid") is the reference, so "hi" gets a set
  pn = parse_parameter_name("beta_c_z_hi", mixed.registry());
  CHECK(pn.category == "hi");
  CHECK(pn.render() == "beta_c_z_hi");
  pn = parse_parameter_name("nu_y_z_swe", mixed.registry());
  CHECK(pn.group == "swe");
  CHECK(pn.predictor == "z");

  CHECK_THROWS_WITH_AS(parse_parameter_name("beta_y_q", lay.registry()),
                       doctest::Contains("unknown parameter"), Error);
}

TEST_CASE("raw extract is parameter-outer, chain-major, one-based") {
  auto ds = gaussian_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 2, 5);
  auto t = extract(d, lay, {});

  const size_t P = d.names.size();
  REQUIRE(t.n_rows() == P * 2 * 5);
  // first parameter block: chain 1 iters 1..5, then chain 2 iters 1..5
  for (int r = 0; r < 10; ++r) {
    CHECK(t.parameter[r] == d.names[0]);
    CHECK(t.chain[r] == r / 5 + 1);
    CHECK(t.iteration[r] == r % 5 + 1);
    CHECK(t.value[r] == d.value(r / 5, r % 5, 0));
  }
  // identity columns come from the registry
  CHECK(t.type[0] == "alpha");
  CHECK(t.response[0] == "y");
  CHECK(t.time[0] == 1.0); // alpha_y[1] carries the original time value
}

TEST_CASE("summary rows agree with raw column statistics") {
  auto ds = gaussian_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 2, 16);
  auto raw = extract(d, lay, {});
  ExtractOptions opt;
  opt.summary = true;
  auto sum = extract(d, lay, opt);

  REQUIRE(sum.n_rows() == d.names.size());
  const size_t per = 2 * 16;
  for (size_t p = 0; p < sum.n_rows(); ++p) {
    REQUIRE(sum.parameter[p] == raw.parameter[p * per]);
    double m = 0.0;
    for (size_t r = 0; r < per; ++r) m += raw.value[p * per + r];
    m /= per;
    double ss = 0.0;
    for (size_t r = 0; r < per; ++r) {
      double e = raw.value[p * per + r] - m;
      ss += e * e;
    }
    CHECK(sum.mean[p] == doctest::Approx(m).epsilon(1e-12));
    CHECK(sum.sd[p] == doctest::Approx(std::sqrt(ss / (per - 1))).epsilon(1e-12));
  }
}

TEST_CASE("quantiles follow the interpolation rule") {
  auto f = parse_formula("obs(y ~ z, family = \"gaussian\")");
  auto ds = build_design(
      f, panel_from_csv("id,time,y,z\n1,1,0,1\n1,2,1,0\n1,3,0,1\n1,4,1,0\n",
                        "time", "id"));
  auto lay = ParamLayout::build(ds);
  Draws d = fake_draws(lay, 1, 100);
  const int p_beta = d.param_index("beta_y_z");
  for (int i = 0; i < 100; ++i) d.chains[0](i, p_beta) = 100.0 - i;

  ExtractOptions opt;
  opt.summary = true;
  opt.probs = {0.5};
  opt.parameters = {"beta_y_z"};
  auto t = extract(d, lay, opt);
  REQUIRE(t.n_rows() == 1);
  CHECK(t.quantiles[0][0] == doctest::Approx(50.5).epsilon(1e-12));

  opt.probs = {0.05, 0.95};
  t = extract(d, lay, opt);
  CHECK(t.quantiles[0][0] == doctest::Approx(5.95).epsilon(1e-12));
  CHECK(t.quantiles[1][0] == doctest::Approx(95.05).epsilon(1e-12));

  // constant draws: sd 0, all quantiles equal the value
  for (int i = 0; i < 100; ++i) d.chains[0](i, p_beta) = 2.25;
  t = extract(d, lay, opt);
  CHECK(t.sd[0] == 0.0);
  CHECK(t.quantiles[0][0] == 2.25);
  CHECK(t.quantiles[1][0] == 2.25);
}

TEST_CASE("filters compose as intersections and reject unknowns") {
  auto ds = mixed_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 2, 4);

  ExtractOptions by_resp;
  by_resp.responses = {"y"};
  ExtractOptions by_type;
  by_type.types = {"beta"};
  ExtractOptions both;
  both.responses = {"y"};
  both.types = {"beta"};

  auto r = table_params(extract(d, lay, by_resp));
  auto ty = table_params(extract(d, lay, by_type));
  auto rt = table_params(extract(d, lay, both));
  std::vector<std::string> expect;
  std::set_intersection(r.begin(), r.end(), ty.begin(), ty.end(),
                        std::back_inserter(expect));
  CHECK(rt == expect);
  CHECK(rt == std::vector<std::string>{"beta_y_z"});

  ExtractOptions bad;
  bad.types = {"gamma"};
  CHECK_THROWS_WITH_AS(extract(d, lay, bad),
                       doctest::Contains("valid types are"), Error);
  bad = {};
  bad.responses = {"w"};
  CHECK_THROWS_WITH_AS(extract(d, lay, bad),
                       doctest::Contains("the model responses are"), Error);
  bad = {};
  bad.parameters = {"beta_y_missing"};
  CHECK_THROWS_WITH_AS(extract(d, lay, bad),
                       doctest::Contains("available parameters"), Error);
}

TEST_CASE("include_fixed=false drops the conditioned time points") {
  auto ds = gaussian_design(); // lag(y) makes the first point fixed
  REQUIRE(ds.fixed_points == 1);
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 1, 4);

  ExtractOptions opt;
  opt.types = {"delta", "alpha"};
  auto with = extract(d, lay, opt);
  opt.include_fixed = false;
  auto without = extract(d, lay, opt);

  double t1 = 1.0;
  bool saw_t1 = false;
  for (size_t r = 0; r < with.n_rows(); ++r) saw_t1 |= with.time[r] == t1;
  CHECK(saw_t1);
  for (size_t r = 0; r < without.n_rows(); ++r) CHECK(without.time[r] > t1);
  // 3 varying series (alpha, x, y_lag1) lose exactly one time point each
  CHECK(with.n_rows() - without.n_rows() == 3 * 4);
}

TEST_CASE("extract CSV layouts") {
  auto ds = gaussian_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 1, 16);

  ExtractOptions opt;
  opt.summary = true;
  opt.types = {"beta"};
  auto csv = extract_to_csv(extract(d, lay, opt));
  std::istringstream lines(csv);
  std::string header, row, extra;
  REQUIRE(std::getline(lines, header));
  REQUIRE(std::getline(lines, row));
  CHECK_FALSE(std::getline(lines, extra));
  CHECK(header == "parameter,mean,sd,q5,q95,time,group,category,response,type");
  CHECK(row.rfind("beta_y_z,", 0) == 0);
  CHECK(row.find(",y,beta") != std::string::npos);

  opt.summary = false;
  csv = extract_to_csv(extract(d, lay, opt));
  std::istringstream raw(csv);
  REQUIRE(std::getline(raw, header));
  CHECK(header == "parameter,chain,iteration,value,time,group,category,response,type");
}

TEST_CASE("fit summary report carries the headline lines") {
  auto ds = gaussian_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 2, 32);
  auto text = fit_summary(ds.formula, "toy", lay, d, diagnose(d));

  CHECK(text.find("Model:") != std::string::npos);
  CHECK(text.find("y gaussian") != std::string::npos);
  CHECK(text.find("Data: toy (Number of observations: 88)") !=
        std::string::npos); // 8 groups x (12 - 1 fixed) points
  CHECK(text.find("Grouping variable: id (Number of groups: 8)") !=
        std::string::npos);
  CHECK(text.find("Time index variable: time (Number of time points: 12)") !=
        std::string::npos);
  CHECK(text.find("Smallest bulk-ESS:") != std::string::npos);
  CHECK(text.find("Smallest tail-ESS:") != std::string::npos);
  CHECK(text.find("Largest Rhat:") != std::string::npos);
  CHECK(text.find("Elapsed time (seconds):") != std::string::npos);
  CHECK(text.find("chain:1") != std::string::npos);
  CHECK(text.find("chain:2") != std::string::npos);
  CHECK(text.find("beta_y_z") != std::string::npos);
  // random effects and spline coefficients stay out of the summary table
  CHECK(text.find("nu_y_alpha_id1") == std::string::npos);
  CHECK(text.find("omega_y_x") == std::string::npos);

  auto single = fake_draws(lay, 1, 32);
  auto text1 = fit_summary(ds.formula, "toy", lay, single, diagnose(single));
  CHECK(text1.find("chain:1") != std::string::npos);
  CHECK(text1.find("chain:2") == std::string::npos);
}

TEST_CASE("diagnostics text reflects sampler events") {
  auto ds = gaussian_design();
  auto lay = ParamLayout::build(ds);
  auto d = fake_draws(lay, 2, 32);

  auto clean = diagnostics_text(diagnose(d));
  CHECK(clean.find("No divergences, saturated max treedepths or low E-BFMIs.") !=
        std::string::npos);
  CHECK(clean.find("Smallest bulk-ESS values:") != std::string::npos);

  d.stats[0](3, 2) = 1.0;
  d.stats[1](7, 2) = 1.0;
  d.stats[1](9, 2) = 1.0;
  d.stats[0](5, 3) = 10.0; // saturation at the default max_treedepth
  auto flagged = diagnostics_text(diagnose(d));
  CHECK(flagged.find("3 divergent transitions after warmup.") !=
        std::string::npos);
  CHECK(flagged.find("1 transitions saturated the maximum tree depth.") !=
        std::string::npos);
}

TEST_CASE("fit artifact round trips byte for byte") {
  std::ostringstream csv;
  csv << "id,time,y,z\n";
  Rng rng(Rng::derive_key(99, {4}));
  for (int g = 1; g <= 6; ++g) {
    for (int t = 1; t <= 8; ++t) {
      double z = rng.normal();
      csv << g << ',' << t << ',' << (0.4 + 1.2 * z + 0.3 * rng.normal())
          << ',' << z << '\n';
    }
  }
  auto panel = panel_from_csv(csv.str(), "time", "id");
  auto fit = prepare_fit("obs(y ~ z, family = \"gaussian\")", panel, {}, "toy");
  fit.config.chains = 2;
  fit.config.iter_warmup = 150;
  fit.config.iter_sampling = 40;
  fit.config.seed = 321;
  run_fit(fit);
  REQUIRE(fit.draws.n_chains == 2);

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "dmpanel_fitio_test";
  fs::remove_all(dir);
  save_fit(fit, dir.string());
  for (const char* f : {"formula.dml", "data.csv", "priors.csv", "draws.csv",
                        "meta.json", "summary.txt"}) {
    CHECK(fs::exists(dir / f));
  }

  auto back = load_fit(dir.string());
  CHECK(back.formula_text == fit.formula_text);
  CHECK(back.data_name == "toy");
  CHECK(back.config.chains == 2);
  CHECK(back.config.iter_warmup == 150);
  CHECK(back.config.iter_sampling == 40);
  CHECK(back.config.seed == 321);
  CHECK(back.config.target_accept == fit.config.target_accept);
  CHECK(priors_to_csv(back.priors) == priors_to_csv(fit.priors));
  CHECK(draws_to_csv(back.draws) == draws_to_csv(fit.draws));
  CHECK(back.draws.warmup_seconds == fit.draws.warmup_seconds);
  CHECK(back.layout.constrained_names() == fit.layout.constrained_names());

  // an identical rerun reproduces the draw file byte for byte
  auto again = prepare_fit("obs(y ~ z, family = \"gaussian\")", panel, {}, "toy");
  again.config = fit.config;
  run_fit(again);
  CHECK(draws_to_csv(again.draws) == draws_to_csv(fit.draws));

  // tampering with saved inputs must be caught by the stored hash
  {
    std::ofstream patch(dir / "data.csv", std::ios::app | std::ios::binary);
    patch << "\n";
  }
  CHECK_THROWS_WITH_AS(load_fit(dir.string()),
                       doctest::Contains("inconsistent"), Error);
  fs::remove_all(dir);
}

TEST_CASE("draw file parser rejects malformed input") {
  CHECK_THROWS_WITH_AS(draws_from_csv(""), doctest::Contains("empty"), Error);
  CHECK_THROWS_WITH_AS(draws_from_csv("a,b,c\n"),
                       doctest::Contains("unexpected header"), Error);

  std::string head =
      "chain,iteration,lp__,energy__,divergent__,treedepth__,n_leapfrog__,"
      "stepsize__,accept__,beta_y_z\n";
  std::string row1 = "1,1,-1,2,0,3,7,0.1,0.9,1.5\n";
  CHECK(draws_from_csv(head + row1).n_iter == 1);

  CHECK_THROWS_WITH_AS(draws_from_csv(head + "1,1,-1,2,0,3\n"),
                       doctest::Contains("fields"), Error);
  CHECK_THROWS_WITH_AS(
      draws_from_csv(head + row1 + "3,1,-1,2,0,3,7,0.1,0.9,1.5\n"),
      doctest::Contains("contiguous"), Error);
  CHECK_THROWS_WITH_AS(
      draws_from_csv(head + row1 + "1,3,-1,2,0,3,7,0.1,0.9,1.5\n"),
      doctest::Contains("consecutive"), Error);
  CHECK_THROWS_WITH_AS(draws_from_csv(head + row1, {"beta_y_x"}),
                       doctest::Contains("does not match the model"), Error);
  CHECK_THROWS_WITH_AS(draws_from_csv(head), doctest::Contains("no draws"),
                       Error);
}

TEST_CASE("saving requires draws") {
  auto panel = panel_from_csv("id,time,y,z\n1,1,0,1\n1,2,1,0\n1,3,0,1\n",
                              "time", "id");
  auto fit = prepare_fit("obs(y ~ z, family = \"gaussian\")", panel);
  CHECK_THROWS_WITH_AS(save_fit(fit, "/tmp/dmpanel_unsampled"),
                       doctest::Contains("unsampled"), Error);
}
