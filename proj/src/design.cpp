#include "dmpanel/design.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dmp {

const ChannelDesign& DesignSet::channel(const std::string& response) const {
  for (const auto& c : channels) {
    if (c.response == response) return c;
  }
  throw spec_error("no design for channel `" + response + "`");
}

int DesignSet::total_random() const {
  int m = 0;
  for (const auto& c : channels) m += c.K_random();
  return m;
}

std::string lag_column_name(const std::string& var, int k) {
  return var + "_lag" + std::to_string(k);
}

Column apply_lag(const Column& col, int k, const PanelData& panel) {
  Column out;
  out.type = col.type;
  out.levels = col.levels;
  out.values.assign(col.values.size(), 0.0);
  out.missing.assign(col.missing.size(), 1);
  const int T = panel.T();
  for (int g = 0; g < panel.N(); ++g) {
    for (int t = k; t < T; ++t) {
      const size_t to = panel.cell(g, t);
      const size_t from = panel.cell(g, t - k);
      out.values[to] = col.values[from];
      out.missing[to] = col.missing[from];
    }
  }
  return out;
}

namespace {

struct CellValue {
  double v = 0.0;
  bool missing = true;
};

CellValue eval_expr(const AuxExpr& e, const PanelData& p, int g, int t) {
  switch (e.op) {
    case AuxExpr::Op::constant:
      return {e.value, false};
    case AuxExpr::Op::column: {
      const Column& col = p.column(e.column);
      const size_t cell = p.cell(g, t);
      if (col.missing[cell]) return {};
      return {col.values[cell], false};
    }
    case AuxExpr::Op::neg: {
      CellValue a = eval_expr(*e.lhs, p, g, t);
      if (a.missing) return {};
      return {-a.v, false};
    }
    case AuxExpr::Op::log:
    case AuxExpr::Op::exp: {
      CellValue a = eval_expr(*e.lhs, p, g, t);
      if (a.missing) return {};
      const double v = e.op == AuxExpr::Op::log ? std::log(a.v) : std::exp(a.v);
      if (!std::isfinite(v)) return {};
      return {v, false};
    }
    default: {
      CellValue a = eval_expr(*e.lhs, p, g, t);
      CellValue b = eval_expr(*e.rhs, p, g, t);
      if (a.missing || b.missing) return {};
      double v = 0.0;
      switch (e.op) {
        case AuxExpr::Op::add: v = a.v + b.v; break;
        case AuxExpr::Op::sub: v = a.v - b.v; break;
        case AuxExpr::Op::mul: v = a.v * b.v; break;
        case AuxExpr::Op::div: v = a.v / b.v; break;
        case AuxExpr::Op::lt: v = a.v < b.v ? 1.0 : 0.0; break;
        case AuxExpr::Op::le: v = a.v <= b.v ? 1.0 : 0.0; break;
        case AuxExpr::Op::gt: v = a.v > b.v ? 1.0 : 0.0; break;
        case AuxExpr::Op::ge: v = a.v >= b.v ? 1.0 : 0.0; break;
        case AuxExpr::Op::eq: v = a.v == b.v ? 1.0 : 0.0; break;
        case AuxExpr::Op::ne: v = a.v != b.v ? 1.0 : 0.0; break;
        default: break;
      }
      if (!std::isfinite(v)) return {};
      return {v, false};
    }
  }
}

void check_aux_operands(const AuxExpr& e, const PanelData& p,
                        const std::string& response) {
  std::set<std::string> cols;
  e.collect_columns(cols);
  for (const auto& name : cols) {
    const Column& col = p.column(name); // throws when absent
    if (col.type == ColumnType::categorical) {
      throw spec_error("deterministic channel `" + response +
                       "` uses categorical column `" + name +
                       "` in an arithmetic expression");
    }
  }
}

} // namespace

bool eval_aux_cell(const PanelData& panel, const ChannelSpec& spec, int g,
                   int t, double* out) {
  const CellValue cv = eval_expr(*spec.aux_expr, panel, g, t);
  if (cv.missing) return false;
  const double v = cv.v;
  if (spec.aux_type == AuxValueType::integer && v != std::floor(v)) {
    throw spec_error("deterministic channel `" + spec.response +
                     "` is declared integer but produced a fractional value");
  }
  if (spec.aux_type == AuxValueType::logical && v != 0.0 && v != 1.0) {
    throw spec_error("deterministic channel `" + spec.response +
                     "` is declared logical but produced a value other "
                     "than 0 or 1");
  }
  *out = v;
  return true;
}

Column evaluate_aux(const PanelData& panel, const ChannelSpec& spec,
                    Warnings& warnings) {
  (void)warnings;
  check_aux_operands(*spec.aux_expr, panel, spec.response);
  Column out;
  out.values.assign(static_cast<size_t>(panel.N()) * panel.T(), 0.0);
  out.missing.assign(out.values.size(), 1);
  switch (spec.aux_type) {
    case AuxValueType::numeric: out.type = ColumnType::numeric; break;
    case AuxValueType::integer: out.type = ColumnType::integer; break;
    case AuxValueType::logical: out.type = ColumnType::boolean; break;
  }
  for (int g = 0; g < panel.N(); ++g) {
    for (int t = 0; t < panel.T(); ++t) {
      double v = 0.0;
      if (!eval_aux_cell(panel, spec, g, t, &v)) continue;
      const size_t cell = panel.cell(g, t);
      out.values[cell] = v;
      out.missing[cell] = 0;
    }
  }
  return out;
}

namespace {

// one design column: values over all cells plus observedness per cell
struct BuiltColumn {
  std::string label;
  std::vector<double> values;
  std::vector<uint8_t> present;
};

std::vector<BuiltColumn> columns_for_variable(const PanelData& p,
                                              const std::string& var,
                                              const std::string& label,
                                              bool drop_reference) {
  const Column& col = p.column(var);
  const size_t cells = col.values.size();
  std::vector<BuiltColumn> out;
  if (col.type == ColumnType::categorical) {
    const size_t start = drop_reference ? 1 : 0;
    for (size_t l = start; l < col.levels.size(); ++l) {
      BuiltColumn bc;
      bc.label = label + col.levels[l]; // level appended directly
      bc.values.assign(cells, 0.0);
      bc.present.assign(cells, 0);
      for (size_t i = 0; i < cells; ++i) {
        if (col.missing[i]) continue;
        bc.present[i] = 1;
        bc.values[i] = col.values[i] == static_cast<double>(l) ? 1.0 : 0.0;
      }
      out.push_back(std::move(bc));
    }
  } else {
    BuiltColumn bc;
    bc.label = label;
    bc.values.assign(cells, 0.0);
    bc.present.assign(cells, 0);
    for (size_t i = 0; i < cells; ++i) {
      if (col.missing[i]) continue;
      bc.present[i] = 1;
      bc.values[i] = col.values[i];
    }
    out.push_back(std::move(bc));
  }
  return out;
}

std::vector<BuiltColumn> columns_for_term(const PanelData& p, const Term& term,
                                          bool drop_reference) {
  switch (term.kind) {
    case TermKind::intercept:
      throw spec_error("intercept terms have no design column");
    case TermKind::covariate:
      return columns_for_variable(p, term.variable, term.variable,
                                  drop_reference);
    case TermKind::lag:
      return columns_for_variable(p, lag_column_name(term.variable, term.shift),
                                  term.label(), drop_reference);
    case TermKind::interaction: {
      std::vector<BuiltColumn> acc =
          columns_for_term(p, term.parts[0], drop_reference);
      for (size_t k = 1; k < term.parts.size(); ++k) {
        const auto next = columns_for_term(p, term.parts[k], drop_reference);
        std::vector<BuiltColumn> crossed;
        for (const auto& a : acc) {
          for (const auto& b : next) {
            BuiltColumn bc;
            bc.label = a.label + ":" + b.label;
            bc.values.assign(a.values.size(), 0.0);
            bc.present.assign(a.values.size(), 0);
            for (size_t i = 0; i < a.values.size(); ++i) {
              if (a.present[i] && b.present[i]) {
                bc.present[i] = 1;
                bc.values[i] = a.values[i] * b.values[i];
              }
            }
            crossed.push_back(std::move(bc));
          }
        }
        acc = std::move(crossed);
      }
      return acc;
    }
  }
  return {};
}

void validate_response(const ChannelDesign& cd, const Column& col) {
  const char* what = nullptr;
  for (size_t i = 0; i < cd.y.size(); ++i) {
    if (!cd.mask[i]) continue;
    const double v = cd.y[i];
    switch (cd.family) {
      case Family::bernoulli:
        if (v != 0.0 && v != 1.0) what = "0/1 values";
        break;
      case Family::poisson:
      case Family::negbin:
        if (v < 0.0 || v != std::floor(v)) what = "non-negative integers";
        break;
      case Family::binomial:
        if (v < 0.0 || v != std::floor(v)) what = "non-negative integers";
        else if (!cd.trials.empty() && v > cd.trials[i]) {
          what = "counts bounded by trials";
        }
        break;
      case Family::exponential:
      case Family::gamma_dist:
        if (v <= 0.0) what = "positive values";
        break;
      case Family::beta:
        if (v <= 0.0 || v >= 1.0) what = "values strictly inside (0, 1)";
        break;
      default:
        break;
    }
    if (what) {
      throw spec_error("channel `" + cd.response + "` with family " +
                       to_string(cd.family) + " requires " + what);
    }
  }
  if (cd.family == Family::categorical &&
      col.type != ColumnType::categorical) {
    throw spec_error("categorical channel `" + cd.response +
                     "` needs a categorical response column");
  }
}

} // namespace

std::vector<std::string> term_column_labels(const PanelData& p,
                                            const Term& term,
                                            bool drop_reference) {
  switch (term.kind) {
    case TermKind::intercept:
      throw spec_error("intercept terms have no design column");
    case TermKind::covariate:
    case TermKind::lag: {
      const std::string var = term.kind == TermKind::lag
                                  ? lag_column_name(term.variable, term.shift)
                                  : term.variable;
      const Column& col = p.column(var);
      if (col.type != ColumnType::categorical) return {term.label()};
      std::vector<std::string> out;
      const size_t start = drop_reference ? 1 : 0;
      for (size_t l = start; l < col.levels.size(); ++l) {
        out.push_back(term.label() + col.levels[l]);
      }
      return out;
    }
    case TermKind::interaction: {
      std::vector<std::string> acc =
          term_column_labels(p, term.parts[0], drop_reference);
      for (size_t k = 1; k < term.parts.size(); ++k) {
        const auto next = term_column_labels(p, term.parts[k], drop_reference);
        std::vector<std::string> crossed;
        for (const auto& a : acc) {
          for (const auto& b : next) crossed.push_back(a + ":" + b);
        }
        acc = std::move(crossed);
      }
      return acc;
    }
  }
  return {};
}

bool term_cell_values(const PanelData& p, const Term& term,
                      bool drop_reference, int g, int t,
                      std::vector<double>& out) {
  switch (term.kind) {
    case TermKind::intercept:
      throw spec_error("intercept terms have no design column");
    case TermKind::covariate:
    case TermKind::lag: {
      const std::string var = term.kind == TermKind::lag
                                  ? lag_column_name(term.variable, term.shift)
                                  : term.variable;
      const Column& col = p.column(var);
      const size_t cell = p.cell(g, t);
      if (col.missing[cell]) return false;
      if (col.type == ColumnType::categorical) {
        const size_t start = drop_reference ? 1 : 0;
        for (size_t l = start; l < col.levels.size(); ++l) {
          out.push_back(col.values[cell] == static_cast<double>(l) ? 1.0 : 0.0);
        }
      } else {
        out.push_back(col.values[cell]);
      }
      return true;
    }
    case TermKind::interaction: {
      std::vector<double> acc;
      if (!term_cell_values(p, term.parts[0], drop_reference, g, t, acc)) {
        return false;
      }
      for (size_t k = 1; k < term.parts.size(); ++k) {
        std::vector<double> next;
        if (!term_cell_values(p, term.parts[k], drop_reference, g, t, next)) {
          return false;
        }
        std::vector<double> crossed;
        crossed.reserve(acc.size() * next.size());
        for (double a : acc) {
          for (double b : next) crossed.push_back(a * b);
        }
        acc = std::move(crossed);
      }
      out.insert(out.end(), acc.begin(), acc.end());
      return true;
    }
  }
  return false;
}

void augment_panel(PanelData& panel, const ModelFormula& f,
                   const std::vector<std::string>& topo_order,
                   Warnings& warnings) {
  // deepest lag of each variable anywhere in the model
  std::map<std::string, int> max_lag;
  auto note_lags = [&](const Term& t, auto&& self) -> void {
    if (t.kind == TermKind::lag) {
      int& m = max_lag[t.variable];
      m = std::max(m, t.shift);
    }
    for (const auto& p : t.parts) self(p, self);
  };
  for (const auto& c : f.channels) {
    for (const auto& t : c.terms) note_lags(t, note_lags);
  }

  // deterministic channels first, in dependency order
  for (const auto& name : topo_order) {
    const ChannelSpec* c = f.find_channel(name);
    if (c->is_stochastic()) {
      if (!panel.has_column(name)) {
        throw spec_error("response `" + name + "` not found in the data");
      }
      continue;
    }
    if (panel.has_column(name)) {
      throw spec_error("deterministic channel `" + name +
                       "` conflicts with an existing data column");
    }
    panel.add_column(name, evaluate_aux(panel, *c, warnings));
    const int used = max_lag.count(name) ? max_lag.at(name) : 0;
    if (used > 0 && c->aux_init.empty() && !c->aux_past) {
      warnings.push_back(
          "Deterministic channel `" + name + "` has a maximum lag of " +
          std::to_string(used) +
          " but you've supplied no initial values: This may result in NA "
          "values for `" + name + "`.");
    }
  }

  // materialize lag columns, seeding aux lags from init/past
  for (const auto& [var, deepest] : max_lag) {
    const Column& base = panel.column(var);
    const ChannelSpec* c = f.find_channel(var);
    const bool is_aux = c && !c->is_stochastic();
    for (int k = 1; k <= deepest; ++k) {
      const std::string lname = lag_column_name(var, k);
      if (panel.has_column(lname)) continue;
      Column lagged = apply_lag(base, k, panel);
      if (is_aux) {
        for (int g = 0; g < panel.N(); ++g) {
          for (int t = 0; t < k; ++t) {
            const int back = k - t; // steps before the panel start
            const size_t cell = panel.cell(g, t);
            if (static_cast<int>(c->aux_init.size()) >= back) {
              lagged.values[cell] = c->aux_init[back - 1];
              lagged.missing[cell] = 0;
            } else if (c->aux_past && back == 1) {
              const CellValue cv = eval_expr(*c->aux_past, panel, g, 0);
              if (!cv.missing) {
                lagged.values[cell] = cv.v;
                lagged.missing[cell] = 0;
              }
            }
          }
        }
      }
      panel.add_column(lname, std::move(lagged));
    }
  }
}

DesignSet build_design(const ModelFormula& f, const PanelData& d) {
  DesignSet ds;
  ds.formula = expand_lags(f);
  ds.warnings = ds.formula.warnings;
  ds.topo_order = check_acyclic(ds.formula);
  ds.fixed_points = fixed_timepoints(ds.formula);
  ds.data = d;
  PanelData& panel = ds.data;

  augment_panel(panel, ds.formula, ds.topo_order, ds.warnings);

  auto masks = missingness_mask(panel, ds.formula);

  const bool needs_basis = ds.formula.any_varying();
  if (needs_basis) {
    if (!ds.formula.splines) {
      throw spec_error(
          "model contains time-varying terms but no splines() component");
    }
    ds.basis = build_spline_basis(panel.T(), *ds.formula.splines);
  }

  const size_t cells = static_cast<size_t>(panel.N()) * panel.T();
  for (const auto& c : ds.formula.channels) {
    if (!c.is_stochastic()) continue;
    ChannelDesign cd;
    cd.response = c.response;
    cd.family = c.family;
    cd.mask = masks.at(c.response);
    cd.fixed_intercept = c.has_intercept(Role::fixed);
    cd.varying_intercept = c.has_intercept(Role::varying);
    const bool drop_reference = cd.fixed_intercept || cd.varying_intercept;

    const Column& resp = panel.column(c.response);
    cd.y.assign(cells, 0.0);
    for (size_t i = 0; i < cells; ++i) {
      if (!resp.missing[i]) cd.y[i] = resp.values[i];
    }
    if (resp.type == ColumnType::categorical) cd.categories = resp.levels;

    if (c.offset) {
      const Column& oc = panel.column(*c.offset);
      if (oc.type == ColumnType::categorical) {
        throw spec_error("offset column `" + *c.offset + "` must be numeric");
      }
      cd.offset.assign(cells, 0.0);
      for (size_t i = 0; i < cells; ++i) {
        if (!oc.missing[i]) cd.offset[i] = oc.values[i];
      }
    }
    if (c.trials) {
      const Column& tc = panel.column(*c.trials);
      if (tc.type != ColumnType::integer && tc.type != ColumnType::numeric) {
        throw spec_error("trials column `" + *c.trials + "` must be numeric");
      }
      cd.trials.assign(cells, 0.0);
      for (size_t i = 0; i < cells; ++i) {
        if (!tc.missing[i]) cd.trials[i] = tc.values[i];
        if (!tc.missing[i] &&
            (tc.values[i] < 0.0 || tc.values[i] != std::floor(tc.values[i]))) {
          throw spec_error("trials column `" + *c.trials +
                           "` must hold non-negative integers");
        }
      }
    }

    for (int pass = 0; pass < 3; ++pass) {
      const Role role = static_cast<Role>(pass);
      std::vector<BuiltColumn> built;
      if (role == Role::random && c.has_intercept(Role::random)) {
        BuiltColumn ones;
        ones.label = "alpha";
        ones.values.assign(cells, 1.0);
        ones.present.assign(cells, 1);
        built.push_back(std::move(ones));
      }
      if (role == Role::fixed && cd.fixed_intercept) {
        BuiltColumn ones;
        ones.label = "alpha";
        ones.values.assign(cells, 1.0);
        ones.present.assign(cells, 1);
        built.push_back(std::move(ones));
      }
      for (const auto& t : c.terms) {
        if (t.role != role || t.kind == TermKind::intercept) continue;
        for (auto& bc : columns_for_term(panel, t, drop_reference)) {
          built.push_back(std::move(bc));
        }
      }
      Eigen::MatrixXd X = Eigen::MatrixXd::Zero(cells, built.size());
      std::vector<std::string> names;
      for (size_t j = 0; j < built.size(); ++j) {
        names.push_back(built[j].label);
        for (size_t i = 0; i < cells; ++i) {
          if (cd.mask[i] && built[j].present[i]) X(i, j) = built[j].values[i];
        }
      }
      // constant columns under an intercept make the fit unidentifiable
      if (drop_reference) {
        for (size_t j = 0; j < built.size(); ++j) {
          if (built[j].label == "alpha") continue;
          bool constant = true, seen = false;
          double first = 0.0;
          for (size_t i = 0; i < cells && constant; ++i) {
            if (!cd.mask[i]) continue;
            if (!seen) {
              first = X(i, j);
              seen = true;
            } else if (X(i, j) != first) {
              constant = false;
            }
          }
          if (seen && constant) {
            ds.warnings.push_back("Column `" + built[j].label +
                                  "` of channel `" + c.response +
                                  "` is constant; the model may be rank "
                                  "deficient");
          }
        }
      }
      switch (role) {
        case Role::fixed:
          cd.X_fixed = std::move(X);
          cd.fixed_names = std::move(names);
          break;
        case Role::varying:
          cd.X_varying = std::move(X);
          cd.varying_names = std::move(names);
          break;
        case Role::random:
          cd.X_random = std::move(X);
          cd.random_names = std::move(names);
          break;
      }
    }
    validate_response(cd, resp);
    ds.channels.push_back(std::move(cd));
  }
  return ds;
}

} // namespace dmp
