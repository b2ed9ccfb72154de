#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "dmpanel/formula.hpp"

using namespace dmp;

namespace {

bool terms_equal(const Term& a, const Term& b) {
  return a.role == b.role && a.same_predictor(b);
}

bool channels_equal(const ChannelSpec& a, const ChannelSpec& b) {
  if (a.response != b.response || a.family != b.family) return false;
  if (a.terms.size() != b.terms.size()) return false;
  for (size_t i = 0; i < a.terms.size(); ++i) {
    if (!terms_equal(a.terms[i], b.terms[i])) return false;
  }
  if (a.offset != b.offset || a.trials != b.trials) return false;
  if (a.is_stochastic()) return true;
  if (a.aux_type != b.aux_type) return false;
  if (print_aux_expr(*a.aux_expr) != print_aux_expr(*b.aux_expr)) return false;
  if (a.aux_init != b.aux_init) return false;
  const bool pa = static_cast<bool>(a.aux_past);
  const bool pb = static_cast<bool>(b.aux_past);
  if (pa != pb) return false;
  if (pa && print_aux_expr(*a.aux_past) != print_aux_expr(*b.aux_past)) return false;
  return true;
}

bool formulas_equal(const ModelFormula& a, const ModelFormula& b) {
  if (a.channels.size() != b.channels.size()) return false;
  for (size_t i = 0; i < a.channels.size(); ++i) {
    if (!channels_equal(a.channels[i], b.channels[i])) return false;
  }
  if (a.splines.has_value() != b.splines.has_value()) return false;
  if (a.splines &&
      (a.splines->df != b.splines->df || a.splines->degree != b.splines->degree ||
       a.splines->noncentered != b.splines->noncentered)) {
    return false;
  }
  if (a.random_spec.has_value() != b.random_spec.has_value()) return false;
  if (a.random_spec &&
      (a.random_spec->correlated != b.random_spec->correlated ||
       a.random_spec->noncentered != b.random_spec->noncentered)) {
    return false;
  }
  return a.lags_shorthand == b.lags_shorthand;
}

int count_terms(const ChannelSpec& c, Role role, TermKind kind) {
  int n = 0;
  for (const auto& t : c.terms) {
    if (t.role == role && t.kind == kind) ++n;
  }
  return n;
}

} // namespace

TEST_CASE("single channel with implicit intercept") {
  auto f = parse_formula("obs(y ~ x, family = \"gaussian\")");
  REQUIRE(f.channels.size() == 1);
  const auto& c = f.channels[0];
  CHECK(c.response == "y");
  CHECK(c.family == Family::gaussian);
  REQUIRE(c.terms.size() == 2);
  CHECK(c.terms[0].kind == TermKind::intercept);
  CHECK(c.terms[0].role == Role::fixed);
  CHECK(c.terms[1].variable == "x");
  CHECK(f.warnings.empty());
}

TEST_CASE("minus one removes the intercept") {
  auto f = parse_formula("obs(y ~ -1 + x + z, family = \"poisson\")");
  const auto& c = f.channels[0];
  CHECK(count_terms(c, Role::fixed, TermKind::intercept) == 0);
  CHECK(c.terms.size() == 2);
  auto f2 = parse_formula("obs(y ~ 0 + x, family = \"poisson\")");
  CHECK(count_terms(f2.channels[0], Role::fixed, TermKind::intercept) == 0);
}

TEST_CASE("varying and random blocks carry their own intercepts") {
  auto f = parse_formula(
      "obs(y ~ -1 + z + varying(~ x + lag(y)) + random(~1), "
      "family = \"gaussian\") + splines(df = 8)");
  const auto& c = f.channels[0];
  CHECK(count_terms(c, Role::fixed, TermKind::intercept) == 0);
  CHECK(count_terms(c, Role::varying, TermKind::intercept) == 1);
  CHECK(count_terms(c, Role::random, TermKind::intercept) == 1);
  CHECK(count_terms(c, Role::varying, TermKind::covariate) == 1);
  CHECK(count_terms(c, Role::varying, TermKind::lag) == 1);
  CHECK(f.splines->df == 8);
  CHECK(f.splines->degree == 3);
  CHECK(f.warnings.empty());
}

TEST_CASE("conflicting intercepts default to time-varying with a warning") {
  auto f = parse_formula(
      "obs(y ~ varying(~x), family = \"gaussian\") + splines(df = 6)");
  const auto& c = f.channels[0];
  CHECK(count_terms(c, Role::fixed, TermKind::intercept) == 0);
  CHECK(count_terms(c, Role::varying, TermKind::intercept) == 1);
  REQUIRE(f.warnings.size() == 1);
  CHECK(f.warnings[0].find("Defaulting to time-varying intercept.") !=
        std::string::npos);
}

TEST_CASE("same predictor in fixed and varying parts is an error") {
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ x + varying(~ -1 + x), family = \"gaussian\") + "
                    "splines(df = 6)"),
      doctest::Contains("both the fixed and varying"), Error);
}

TEST_CASE("duplicate predictors within one part collapse silently") {
  auto f = parse_formula("obs(y ~ x + x + z, family = \"gaussian\")");
  CHECK(f.channels[0].terms.size() == 3); // intercept, x, z
}

TEST_CASE("lag terms parse in all three spellings") {
  auto f = parse_formula(
      "obs(y ~ lag(x) + lag(z, 2) + lag(w, k = 3), family = \"gaussian\")");
  const auto& c = f.channels[0];
  REQUIRE(c.terms.size() == 4);
  CHECK(c.terms[1].kind == TermKind::lag);
  CHECK(c.terms[1].shift == 1);
  CHECK(c.terms[2].shift == 2);
  CHECK(c.terms[3].shift == 3);
  CHECK(c.terms[3].label() == "w_lag3");
}

TEST_CASE("star expands to main effects plus interaction") {
  auto f = parse_formula("obs(y ~ a*b, family = \"gaussian\")");
  const auto& c = f.channels[0];
  REQUIRE(c.terms.size() == 4);
  CHECK(c.terms[1].variable == "a");
  CHECK(c.terms[2].variable == "b");
  CHECK(c.terms[3].kind == TermKind::interaction);
  CHECK(c.terms[3].label() == "a:b");

  auto f3 = parse_formula("obs(y ~ a*b*c, family = \"gaussian\")");
  CHECK(f3.channels[0].terms.size() == 8); // intercept + 7 crossed terms
  auto f2 = parse_formula("obs(y ~ a:b, family = \"gaussian\")");
  CHECK(f2.channels[0].terms.size() == 2);
  auto f4 = parse_formula("obs(y ~ lag(y):x, family = \"gaussian\")");
  CHECK(f4.channels[0].terms[1].label() == "y_lag1:x");
}

TEST_CASE("offset and trials attach to the channel") {
  auto f = parse_formula(
      "obs(y ~ x + offset(log_exposure), family = \"poisson\") + "
      "obs(s ~ z + trials(n), family = \"binomial\")");
  CHECK(f.channels[0].offset == "log_exposure");
  CHECK(f.channels[1].trials == "n");
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ x + trials(n), family = \"poisson\")"),
      doctest::Contains("only valid for the binomial"), Error);
  CHECK_THROWS_WITH_AS(parse_formula("obs(y ~ x, family = \"binomial\")"),
                       doctest::Contains("requires a trials()"), Error);
}

TEST_CASE("I and lfactor and unknown constructs are rejected") {
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ I(x + z), family = \"gaussian\")"),
      doctest::Contains("I() is not allowed"), Error);
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ x, family = \"gaussian\") + lfactor()"),
      doctest::Contains("latent factors out of scope"), Error);
  CHECK_THROWS_AS(parse_formula("obs(y ~ x, family = \"flat\")"), Error);
  CHECK_THROWS_AS(parse_formula("obs(y ~ sqrt(x), family = \"gaussian\")"),
                  Error);
}

TEST_CASE("categorical channels reject random effects") {
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ x + random(~1), family = \"categorical\")"),
      doctest::Contains("categorical"), Error);
}

TEST_CASE("syntax errors report line and column") {
  try {
    parse_formula("obs(y ~ x,\n  family = gaussian)");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.exit_code() == 2);
    CHECK(std::string(e.what()).find("2:12") != std::string::npos);
  }
}

TEST_CASE("auxiliary channel with init") {
  auto f = parse_formula(
      "obs(p ~ x, family = \"poisson\") + "
      "aux(numeric(logp) ~ log(p + 1) | init(0))");
  REQUIRE(f.channels.size() == 2);
  const auto& c = f.channels[1];
  CHECK(!c.is_stochastic());
  CHECK(c.aux_type == AuxValueType::numeric);
  CHECK(print_aux_expr(*c.aux_expr) == "log(p + 1)");
  REQUIRE(c.aux_init.size() == 1);
  CHECK(c.aux_init[0] == 0.0);
  std::set<std::string> cols;
  c.aux_expr->collect_columns(cols);
  CHECK(cols == std::set<std::string>{"p"});
}

TEST_CASE("auxiliary channel with past and operator precedence") {
  auto f = parse_formula(
      "obs(z ~ x, family = \"gaussian\") + "
      "aux(integer(d) ~ (z > 0) * 2 + exp(-z) / 3 - 1 | past(z * z))");
  const auto& c = f.channels[1];
  CHECK(c.aux_type == AuxValueType::integer);
  CHECK(print_aux_expr(*c.aux_expr) == "(z > 0) * 2 + exp(-z) / 3 - 1");
  CHECK(print_aux_expr(*c.aux_past) == "z * z");
  std::set<std::string> cols;
  c.aux_expr->collect_columns(cols);
  CHECK(cols.count("z") == 1);
}

TEST_CASE("aux init and past are mutually exclusive by grammar") {
  CHECK_THROWS_AS(
      parse_formula("obs(x ~ z, family = \"gaussian\") + "
                    "aux(numeric(q) ~ x | start(0))"),
      Error);
}

TEST_CASE("lags shorthand parses scalar and vector forms") {
  auto f = parse_formula(
      "obs(y ~ 1, family = \"gaussian\") + lags(k = 1)");
  CHECK(f.lags_shorthand == std::set<int>{1});
  auto f2 = parse_formula(
      "obs(y ~ 1, family = \"gaussian\") + lags(k = c(1, 3))");
  CHECK(f2.lags_shorthand == std::set<int>{1, 3});
  CHECK_THROWS_AS(
      parse_formula("obs(y ~ 1, family = \"gaussian\") + lags(k = 0)"), Error);
}

TEST_CASE("random_spec options") {
  auto f = parse_formula(
      "obs(y ~ random(~1), family = \"gaussian\") + "
      "random_spec(correlated = FALSE, noncentered = FALSE)");
  REQUIRE(f.random_spec.has_value());
  CHECK(!f.random_spec->correlated);
  CHECK(!f.random_spec->noncentered);
  // defaults when the component is absent
  auto d = parse_formula("obs(y ~ random(~1), family = \"gaussian\")")
               .random_spec_or_default();
  CHECK(d.correlated);
  CHECK(d.noncentered);
}

TEST_CASE("combine rejects duplicates") {
  auto a = parse_formula("obs(y ~ x, family = \"gaussian\")");
  auto b = parse_formula("obs(z ~ y, family = \"poisson\")");
  auto ab = combine(a, b);
  CHECK(ab.channels.size() == 2);
  CHECK_THROWS_WITH_AS(combine(ab, a), doctest::Contains("duplicate channel"),
                       Error);
  auto s1 = parse_formula(
      "obs(y ~ varying(~x), family = \"gaussian\") + splines(df = 5)");
  CHECK_THROWS_WITH_AS(combine(s1, s1), doctest::Contains("duplicate channel"),
                       Error);
}

TEST_CASE("varying terms require a splines component") {
  CHECK_THROWS_WITH_AS(
      parse_formula("obs(y ~ varying(~x), family = \"gaussian\")"),
      doctest::Contains("splines()"), Error);
}

TEST_CASE("expand_lags adds self and cross lags to stochastic channels") {
  auto f = parse_formula(
      "obs(y ~ x, family = \"gaussian\") + "
      "obs(z ~ x, family = \"poisson\") + "
      "aux(numeric(q) ~ z + 1 | init(0)) + lags(k = c(1, 2))");
  auto g = expand_lags(f);
  const auto* y = g.find_channel("y");
  const auto* z = g.find_channel("z");
  const auto* q = g.find_channel("q");
  // intercept + x + {lag1, lag2} x {y, z}
  CHECK(y->terms.size() == 6);
  CHECK(z->terms.size() == 6);
  CHECK(q->terms.empty());
  Term probe;
  probe.kind = TermKind::lag;
  probe.variable = "z";
  probe.shift = 2;
  CHECK(y->find_term(probe) != nullptr);
  CHECK(z->find_term(probe) != nullptr);
}

TEST_CASE("expand_lags keeps explicit duplicates single and is idempotent") {
  auto f = parse_formula(
      "obs(y ~ lag(y) + x, family = \"gaussian\") + "
      "obs(z ~ 1, family = \"gaussian\") + lags(k = 1)");
  auto g = expand_lags(f);
  const auto* y = g.find_channel("y");
  CHECK(y->terms.size() == 4); // intercept, lag(y), x, lag(z)
  auto gg = expand_lags(g);
  CHECK(formulas_equal(g, gg));
}

TEST_CASE("expand_lags without shorthand is the identity") {
  auto f = parse_formula("obs(y ~ lag(y), family = \"gaussian\")");
  CHECK(formulas_equal(f, expand_lags(f)));
}

TEST_CASE("topological order follows same-time dependencies") {
  auto f = parse_formula(
      "obs(c ~ b, family = \"gaussian\") + "
      "obs(b ~ a, family = \"gaussian\") + "
      "obs(a ~ x, family = \"gaussian\")");
  auto order = check_acyclic(f);
  REQUIRE(order.size() == 3);
  CHECK(order == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("lagged dependencies do not create same-time edges") {
  auto f = parse_formula(
      "obs(a ~ lag(b), family = \"gaussian\") + "
      "obs(b ~ lag(a), family = \"gaussian\")");
  CHECK_NOTHROW(check_acyclic(f));
}

TEST_CASE("cycles are reported with the offending chain") {
  auto f = parse_formula(
      "obs(a ~ b, family = \"gaussian\") + "
      "obs(b ~ a, family = \"gaussian\")");
  CHECK_THROWS_WITH_AS(check_acyclic(f),
                       doctest::Contains("Cyclic dependency found"), Error);
}

TEST_CASE("offsets and aux expressions create dependencies too") {
  auto f = parse_formula(
      "obs(y ~ x + offset(e), family = \"poisson\") + "
      "aux(numeric(e) ~ log(y + 1) | init(0))");
  CHECK_THROWS_WITH_AS(check_acyclic(f),
                       doctest::Contains("Cyclic dependency found"), Error);
}

TEST_CASE("acyclicity decision matches brute-force search on small graphs") {
  // every digraph on 4 labelled nodes, tested against permutation search
  const int n = 4;
  const char* names[] = {"a", "b", "c", "d"};
  std::vector<std::pair<int, int>> slots;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) slots.push_back({i, j});
    }
  }
  int checked = 0;
  for (unsigned mask = 0; mask < (1u << slots.size()); mask += 7) { // stride keeps runtime low
    bool edge[4][4] = {};
    for (size_t s = 0; s < slots.size(); ++s) {
      if (mask & (1u << s)) edge[slots[s].first][slots[s].second] = true;
    }
    // brute force: does any permutation respect all edges?
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    bool acyclic = false;
    do {
      std::vector<int> pos(n);
      for (int i = 0; i < n; ++i) pos[perm[i]] = i;
      bool ok = true;
      for (int i = 0; i < n && ok; ++i) {
        for (int j = 0; j < n && ok; ++j) {
          if (edge[i][j] && pos[i] >= pos[j]) ok = false;
        }
      }
      if (ok) acyclic = true;
    } while (!acyclic && std::next_permutation(perm.begin(), perm.end()));

    std::string text;
    for (int j = 0; j < n; ++j) {
      if (j) text += " + ";
      text += std::string("obs(") + names[j] + " ~ 1";
      for (int i = 0; i < n; ++i) {
        if (edge[i][j]) text += std::string(" + ") + names[i];
      }
      text += ", family = \"gaussian\")";
    }
    auto f = parse_formula(text);
    bool ours;
    try {
      auto order = check_acyclic(f);
      ours = true;
      // verify the returned order is a valid schedule
      std::vector<int> pos(n);
      for (int i = 0; i < n; ++i) {
        pos[i] = static_cast<int>(
            std::find(order.begin(), order.end(), names[i]) - order.begin());
      }
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          if (edge[i][j]) CHECK(pos[i] < pos[j]);
        }
      }
    } catch (const Error&) {
      ours = false;
    }
    CHECK(ours == acyclic);
    ++checked;
  }
  CHECK(checked > 500);
}

TEST_CASE("fixed timepoints follow the largest stochastic lag") {
  auto f = parse_formula("obs(y ~ lag(x), family = \"gaussian\")");
  CHECK(fixed_timepoints(f) == 0); // x is exogenous
  auto g = parse_formula("obs(y ~ lag(y, 2), family = \"gaussian\")");
  CHECK(fixed_timepoints(g) == 2);
  auto h = parse_formula(
      "obs(y ~ 1, family = \"gaussian\") + lags(k = c(1, 3))");
  CHECK(fixed_timepoints(h) == 3);
  // lags of deterministic channels do not freeze leading time points
  auto i = parse_formula(
      "obs(y ~ lag(q), family = \"gaussian\") + "
      "aux(numeric(q) ~ x + 1 | init(0))");
  CHECK(fixed_timepoints(i) == 0);
}

TEST_CASE("print and reparse reproduces the formula") {
  const char* cases[] = {
      "obs(y ~ x, family = \"gaussian\")",
      "obs(y ~ -1 + z + varying(~ x + lag(y)) + random(~1), "
      "family = \"gaussian\") + splines(df = 8)",
      "obs(g ~ lag(g) + lag(logp), family = \"gaussian\") + "
      "obs(p ~ lag(g) + lag(logp), family = \"poisson\") + "
      "obs(b ~ lag(b) * lag(logp), family = \"bernoulli\") + "
      "aux(numeric(logp) ~ log(p + 1) | init(0))",
      "obs(y ~ x + offset(e) + random(~ -1 + z), family = \"negbin\") + "
      "random_spec(correlated = FALSE, noncentered = TRUE)",
      "obs(s ~ z + trials(n), family = \"binomial\") + lags(k = c(1, 2))",
      "obs(q ~ varying(~ -1 + w), family = \"beta\") + "
      "splines(df = 10, degree = 2, noncentered = TRUE)",
  };
  for (const char* text : cases) {
    CAPTURE(text);
    auto f = parse_formula(text);
    auto g = parse_formula(print_formula(f));
    CHECK(formulas_equal(f, g));
  }
}

TEST_CASE("channel table lists family and formula") {
  auto f = parse_formula(
      "obs(y ~ -1 + z + varying(~x), family = \"gaussian\") + splines(df = 4)");
  auto table = format_channel_table(f);
  CHECK(table.find("Family") != std::string::npos);
  CHECK(table.find("gaussian") != std::string::npos);
  CHECK(table.find("y ~ -1 + z + varying(~x)") != std::string::npos);
}
