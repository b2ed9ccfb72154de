#pragma once

#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dmpanel/common.hpp"

namespace dmp {

enum class TermKind { intercept, covariate, lag, interaction };
enum class Role { fixed, varying, random };

std::string to_string(Role role);

struct Term {
  TermKind kind = TermKind::covariate;
  std::string variable;    // base variable for covariate/lag; empty otherwise
  int shift = 0;           // >= 1 iff kind == lag
  Role role = Role::fixed;
  std::vector<Term> parts; // interaction constituents, each covariate or lag

  /// Stable identifier used in design-column and parameter names,
  /// e.g. "z", "y_lag1", "b_lag1:logp_lag1".
  std::string label() const;
  bool same_predictor(const Term& other) const; // ignores role
  bool operator==(const Term& other) const;
};

enum class Family {
  gaussian,
  poisson,
  negbin,
  bernoulli,
  binomial,
  exponential,
  gamma_dist,
  beta,
  categorical,
  deterministic
};

Family family_from_string(const std::string& name);
std::string to_string(Family family);

/// Expression tree for deterministic (auxiliary) channels.
struct AuxExpr;
using AuxExprPtr = std::shared_ptr<const AuxExpr>;

struct AuxExpr {
  enum class Op {
    constant,
    column,
    neg,
    log,
    exp,
    add,
    sub,
    mul,
    div,
    lt,
    le,
    gt,
    ge,
    eq,
    ne
  };
  Op op = Op::constant;
  double value = 0.0;
  std::string column;
  AuxExprPtr lhs;
  AuxExprPtr rhs;

  void collect_columns(std::set<std::string>& out) const;
};

std::string print_aux_expr(const AuxExpr& e);

enum class AuxValueType { numeric, integer, logical };

struct ChannelSpec {
  std::string response;
  Family family = Family::gaussian;
  std::vector<Term> terms;
  std::optional<std::string> offset;
  std::optional<std::string> trials;

  // deterministic channels only
  AuxValueType aux_type = AuxValueType::numeric;
  AuxExprPtr aux_expr;
  std::vector<double> aux_init; // starting values for lag 1, 2, ...
  AuxExprPtr aux_past;

  bool is_stochastic() const { return family != Family::deterministic; }
  bool has_intercept(Role role) const;
  const Term* find_term(const Term& predictor) const;
};

struct SplinesConfig {
  int df = 0;
  int degree = 3;
  bool noncentered = false;
};

struct RandomSpecConfig {
  bool correlated = true;
  bool noncentered = true;
};

struct ModelFormula {
  std::vector<ChannelSpec> channels;
  std::optional<SplinesConfig> splines;
  std::optional<RandomSpecConfig> random_spec;
  std::set<int> lags_shorthand;
  Warnings warnings;

  RandomSpecConfig random_spec_or_default() const {
    return random_spec.value_or(RandomSpecConfig{});
  }
  const ChannelSpec* find_channel(const std::string& response) const;
  bool any_varying() const;
};

/// Parses a complete formula text: obs/aux components joined with '+' plus
/// optional splines/lags/random_spec components. Reports errors with
/// 1-based line/column positions.
ModelFormula parse_formula(const std::string& text);

/// Merges two partial formulas; rejects duplicate responses and duplicate
/// splines/random_spec components.
ModelFormula combine(const ModelFormula& a, const ModelFormula& b);

/// Applies the lags(k = ...) shorthand: adds a lag of every stochastic
/// response at each requested shift to every stochastic channel.
ModelFormula expand_lags(const ModelFormula& f);

/// Returns the channel processing order implied by same-time dependencies,
/// or throws when the dependency graph has a cycle.
std::vector<std::string> check_acyclic(const ModelFormula& f);

/// Number of leading time points conditioned on rather than modeled.
int fixed_timepoints(const ModelFormula& f);

/// Canonical text form; parse_formula(print_formula(f)) reproduces f.
std::string print_formula(const ModelFormula& f);

/// Short per-channel "family / formula" table used by fit summaries.
std::string format_channel_table(const ModelFormula& f);

} // namespace dmp
