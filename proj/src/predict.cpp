#include "dmpanel/predict.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <Eigen/Cholesky>

#include "dmpanel/diagnostics.hpp"
#include "dmpanel/families.hpp"
#include "dmpanel/numfmt.hpp"
#include "dmpanel/rng.hpp"

namespace dmp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// ---------------------------------------------------------------------------
// input panel preparation
// ---------------------------------------------------------------------------

// Remaps newdata categorical codes onto the training level order so dummy
// coding matches the fitted design. Unseen levels are an error only when a
// cell actually carries one.
void reconcile_levels(PanelData& panel, const PanelData& train) {
  for (auto& [name, col] : panel.columns) {
    if (!train.has_column(name)) continue;
    const Column& ref = train.column(name);
    const bool cat_new = col.type == ColumnType::categorical;
    const bool cat_ref = ref.type == ColumnType::categorical;
    if (cat_new != cat_ref) {
      throw spec_error("column `" + name + "` is " +
                       (cat_new ? "categorical" : "numeric") +
                       " in the prediction data but " +
                       (cat_ref ? "categorical" : "numeric") +
                       " in the training data");
    }
    if (!cat_new) continue;
    std::vector<int> remap(col.levels.size(), -1);
    for (size_t l = 0; l < col.levels.size(); ++l) {
      auto it = std::find(ref.levels.begin(), ref.levels.end(), col.levels[l]);
      if (it != ref.levels.end()) {
        remap[l] = static_cast<int>(it - ref.levels.begin());
      }
    }
    for (size_t i = 0; i < col.values.size(); ++i) {
      if (col.missing[i]) continue;
      const int m = remap[static_cast<size_t>(col.values[i])];
      if (m < 0) {
        throw spec_error("column `" + name + "` has level `" +
                         col.levels[static_cast<size_t>(col.values[i])] +
                         "` that was not present in the training data");
      }
      col.values[i] = m;
    }
    col.levels = ref.levels;
  }
}

// sim time index -> training time index; the block must sit contiguously
// inside the fitted grid because splines are undefined elsewhere
std::vector<int> map_times(const PanelData& sim, const PanelData& train) {
  std::vector<int> to_train;
  for (double v : sim.time_values) {
    auto it =
        std::find(train.time_values.begin(), train.time_values.end(), v);
    if (it == train.time_values.end()) {
      throw spec_error("prediction time point " + fmt_num(v) +
                       " is not part of the fitted time grid; forecasting "
                       "beyond the training range is not supported");
    }
    to_train.push_back(static_cast<int>(it - train.time_values.begin()));
  }
  for (size_t i = 1; i < to_train.size(); ++i) {
    if (to_train[i] != to_train[i - 1] + 1) {
      throw spec_error("prediction time points must form a contiguous block "
                       "of the fitted time grid");
    }
  }
  return to_train;
}

// sim group index -> training group index, -1 for groups the fit never saw
std::vector<int> map_groups(const PanelData& sim, const PanelData& train,
                            NewLevels policy) {
  std::vector<int> to_train;
  bool any_new = false;
  for (const auto& id : sim.group_ids) {
    auto it = std::find(train.group_ids.begin(), train.group_ids.end(), id);
    if (it == train.group_ids.end()) {
      if (policy == NewLevels::none) {
        throw spec_error(
            "group `" + id +
            "` was not in the training data; set new_levels to bootstrap, "
            "gaussian, or original to predict for unseen groups");
      }
      any_new = true;
      to_train.push_back(-1);
    } else {
      to_train.push_back(static_cast<int>(it - train.group_ids.begin()));
    }
  }
  if (policy == NewLevels::original && any_new) {
    if (sim.N() != train.N()) {
      throw spec_error("new_levels = original requires as many prediction "
                       "groups as training groups (got " +
                       std::to_string(sim.N()) + " vs " +
                       std::to_string(train.N()) + ")");
    }
    // positional reuse: sorted prediction ids map onto sorted training ids
    std::vector<int> sim_order(sim.group_ids.size()), train_order(train.group_ids.size());
    for (size_t i = 0; i < sim_order.size(); ++i) sim_order[i] = static_cast<int>(i);
    for (size_t i = 0; i < train_order.size(); ++i) train_order[i] = static_cast<int>(i);
    std::sort(sim_order.begin(), sim_order.end(), [&](int a, int b) {
      return sim.group_ids[a] < sim.group_ids[b];
    });
    std::sort(train_order.begin(), train_order.end(), [&](int a, int b) {
      return train.group_ids[a] < train.group_ids[b];
    });
    for (size_t i = 0; i < sim_order.size(); ++i) {
      to_train[static_cast<size_t>(sim_order[i])] = train_order[i];
    }
  }
  return to_train;
}

void collect_term_variables(const Term& t, std::set<std::string>& out) {
  if (t.kind == TermKind::covariate || t.kind == TermKind::lag) {
    out.insert(t.variable);
  }
  for (const auto& p : t.parts) collect_term_variables(p, out);
}

// model variables that are nobody's response: candidates for locf filling
std::set<std::string> exogenous_variables(const ModelFormula& f) {
  std::set<std::string> vars;
  std::set<std::string> responses;
  for (const auto& c : f.channels) {
    responses.insert(c.response);
    for (const auto& t : c.terms) collect_term_variables(t, vars);
    if (c.offset) vars.insert(*c.offset);
    if (c.trials) vars.insert(*c.trials);
    if (c.aux_expr) c.aux_expr->collect_columns(vars);
    if (c.aux_past) c.aux_past->collect_columns(vars);
  }
  for (const auto& r : responses) vars.erase(r);
  return vars;
}

// ---------------------------------------------------------------------------
// draw-column lookup tables
// ---------------------------------------------------------------------------

struct SetCols {
  std::vector<int> alpha_t;            // per training time (varying icpt)
  std::vector<int> beta;               // aligned with fixed_names
  std::vector<std::vector<int>> delta; // [varying col][training time]
};

struct ChanCols {
  std::vector<SetCols> sets; // one, or per non-reference category
  int aux = -1;              // sigma / phi draw column
  std::vector<int> nu0;      // per random column: draw column of group 0
};

struct ParamMaps {
  std::vector<ChanCols> chans;                  // per design channel
  std::vector<int> sigma_nu;                    // global nu-column order
  std::vector<std::tuple<int, int, int>> corr;  // (a, b, draw column)
};

ParamMaps build_param_maps(const Fit& fit) {
  const DesignSet& ds = *fit.design;
  const auto& reg = fit.layout.registry();
  const int T = ds.data.T();

  ParamMaps pm;
  std::map<std::string, int> chan_of;
  for (size_t c = 0; c < ds.channels.size(); ++c) {
    const ChannelDesign& cd = ds.channels[c];
    chan_of[cd.response] = static_cast<int>(c);
    ChanCols cc;
    const int n_sets = cd.n_cat() > 0 ? cd.n_cat() - 1 : 1;
    cc.sets.resize(n_sets);
    for (auto& s : cc.sets) {
      s.alpha_t.assign(T, -1);
      s.beta.assign(cd.fixed_names.size(), -1);
      s.delta.assign(cd.varying_names.size(), std::vector<int>(T, -1));
    }
    cc.nu0.assign(cd.random_names.size(), -1);
    pm.chans.push_back(std::move(cc));
  }

  auto set_index = [&](const ChannelDesign& cd, const std::string& cat) {
    if (cd.n_cat() == 0) return 0;
    for (int l = 1; l < cd.n_cat(); ++l) {
      if (cd.categories[l] == cat) return l - 1;
    }
    throw numeric_error("internal: category `" + cat + "` without a set");
  };
  auto col_pos = [](const std::vector<std::string>& names,
                    const std::string& label) {
    auto it = std::find(names.begin(), names.end(), label);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
  };

  int corr_a = 0, corr_b = 1;
  const int M = ds.total_random();
  for (size_t p = 0; p < reg.size(); ++p) {
    const auto& e = reg[p];
    if (e.type == "sigma_nu") {
      pm.sigma_nu.push_back(static_cast<int>(p));
      continue;
    }
    if (e.type == "corr_nu") {
      pm.corr.emplace_back(corr_a, corr_b, static_cast<int>(p));
      if (++corr_b >= M) corr_b = ++corr_a + 1;
      continue;
    }
    if (e.type == "tau" || e.type == "tau_alpha" || e.type == "omega") continue;
    auto it = chan_of.find(e.response);
    if (it == chan_of.end()) continue;
    const ChannelDesign& cd = ds.channels[static_cast<size_t>(it->second)];
    ChanCols& cc = pm.chans[static_cast<size_t>(it->second)];
    if (e.type == "sigma" || e.type == "phi") {
      cc.aux = static_cast<int>(p);
      continue;
    }
    if (e.type == "nu") {
      const int j = col_pos(cd.random_names, e.predictor);
      if (j >= 0 && cc.nu0[static_cast<size_t>(j)] < 0) {
        cc.nu0[static_cast<size_t>(j)] = static_cast<int>(p);
      }
      continue;
    }
    SetCols& sc = cc.sets[static_cast<size_t>(set_index(cd, e.category))];
    if (e.type == "alpha") {
      if (e.time >= 1) {
        sc.alpha_t[static_cast<size_t>(e.time - 1)] = static_cast<int>(p);
      } else if (cd.fixed_intercept) {
        sc.beta[0] = static_cast<int>(p); // the leading ones column
      }
    } else if (e.type == "beta") {
      const int j = col_pos(cd.fixed_names, e.predictor);
      if (j >= 0) sc.beta[static_cast<size_t>(j)] = static_cast<int>(p);
    } else if (e.type == "delta") {
      const int k = col_pos(cd.varying_names, e.predictor);
      if (k >= 0 && e.time >= 1) {
        sc.delta[static_cast<size_t>(k)][static_cast<size_t>(e.time - 1)] =
            static_cast<int>(p);
      }
    }
  }
  return pm;
}

struct DrawView {
  const Draws* d = nullptr;
  int chain = 0;
  int iter = 0;
  double operator[](int col) const { return d->chains[chain](iter, col); }
};

// ---------------------------------------------------------------------------
// simulation context
// ---------------------------------------------------------------------------

struct StochRt {
  const ChannelSpec* spec = nullptr;
  const ChannelDesign* train = nullptr;
  int ci = 0;              // design channel index
  int topo = 0;            // position in topological order (rng keying)
  bool drop_reference = false;
  std::vector<const Term*> fixed_terms, varying_terms, random_terms;
  std::vector<int> lag_shifts;
  std::vector<uint8_t> to_sim; // per cell: missing in the input, so simulate
};

struct AuxRt {
  const ChannelSpec* spec = nullptr;
  std::vector<int> lag_shifts;
};

struct Step {
  bool stochastic = false;
  int idx = 0; // into stoch / aux
};

struct SimContext {
  const Fit* fit = nullptr;
  PanelData base;     // effective input, pre-augmentation (observed frame)
  PanelData panel;    // augmented working panel, mutated per draw
  PanelData pristine; // augmented snapshot for per-draw restore
  std::vector<int> t_train;  // sim time -> training time
  std::vector<int> g_train;  // sim group -> training group (-1 new)
  ParamMaps pm;
  std::vector<int> nu_col0;  // per global nu column: draw column of group 0
  std::vector<StochRt> stoch;
  std::vector<AuxRt> aux;
  std::vector<Step> steps;
  std::vector<int> sel; // pooled draw indices: chain * n_iter + iter
  std::vector<std::string> mutable_cols;
  int sim_fixed = 0;
};

std::vector<int> select_draws(const Draws& d, int n_draws) {
  const int S = d.n_chains * d.n_iter;
  if (S == 0) throw spec_error("the fit has no posterior draws to predict from");
  if (n_draws > S) {
    throw spec_error("n_draws (" + std::to_string(n_draws) +
                     ") exceeds the posterior sample size (" +
                     std::to_string(S) + ")");
  }
  std::vector<int> sel;
  if (n_draws <= 0 || n_draws == S) {
    for (int i = 0; i < S; ++i) sel.push_back(i);
  } else {
    // even thinning keeps draws from every chain segment
    for (int i = 0; i < n_draws; ++i) {
      sel.push_back(static_cast<int>(
          static_cast<long long>(i) * S / n_draws));
    }
  }
  return sel;
}

std::map<std::string, int> model_max_lags(const ModelFormula& f) {
  std::map<std::string, int> out;
  auto walk = [&](const Term& t, auto&& self) -> void {
    if (t.kind == TermKind::lag) {
      int& m = out[t.variable];
      m = std::max(m, t.shift);
    }
    for (const auto& p : t.parts) self(p, self);
  };
  for (const auto& c : f.channels) {
    for (const auto& t : c.terms) walk(t, walk);
  }
  return out;
}

// builds the working panel plus all per-channel runtime tables; `clear`
// removes stochastic responses after the conditioned window (the
// newdata-is-null reading of "predict from the posterior")
SimContext make_context(const Fit& fit, const PanelData* newdata, bool clear,
                        ImputeMethod impute, NewLevels new_levels,
                        int n_draws) {
  const DesignSet& ds = *fit.design;
  SimContext cx;
  cx.fit = &fit;
  cx.base = newdata ? *newdata : fit.input;
  cx.sim_fixed = ds.fixed_points;

  reconcile_levels(cx.base, ds.data);
  cx.t_train = map_times(cx.base, ds.data);
  cx.g_train = map_groups(cx.base, ds.data, new_levels);

  if (impute == ImputeMethod::locf) {
    for (const auto& var : exogenous_variables(ds.formula)) {
      if (cx.base.has_column(var)) {
        locf_column(cx.base.column(var), cx.base.N(), cx.base.T());
      }
    }
  }
  if (clear) {
    for (const auto& c : ds.formula.channels) {
      if (!c.is_stochastic()) continue;
      if (!cx.base.has_column(c.response)) continue;
      Column& col = cx.base.column(c.response);
      for (int g = 0; g < cx.base.N(); ++g) {
        for (int t = cx.sim_fixed; t < cx.base.T(); ++t) {
          col.missing[cx.base.cell(g, t)] = 1;
        }
      }
    }
  }

  cx.panel = cx.base;
  Warnings scratch;
  augment_panel(cx.panel, ds.formula, ds.topo_order, scratch);

  const auto lags = model_max_lags(ds.formula);
  auto lag_shifts_of = [&](const std::string& var) {
    std::vector<int> shifts;
    auto it = lags.find(var);
    if (it != lags.end()) {
      for (int k = 1; k <= it->second; ++k) {
        if (cx.panel.has_column(lag_column_name(var, k))) shifts.push_back(k);
      }
    }
    return shifts;
  };

  for (const auto& name : ds.topo_order) {
    const ChannelSpec* spec = ds.formula.find_channel(name);
    if (!spec->is_stochastic()) {
      AuxRt a;
      a.spec = spec;
      a.lag_shifts = lag_shifts_of(name);
      cx.steps.push_back({false, static_cast<int>(cx.aux.size())});
      cx.aux.push_back(std::move(a));
      continue;
    }
    StochRt s;
    s.spec = spec;
    s.topo = static_cast<int>(cx.steps.size());
    for (size_t c = 0; c < ds.channels.size(); ++c) {
      if (ds.channels[c].response == name) {
        s.ci = static_cast<int>(c);
        s.train = &ds.channels[c];
      }
    }
    s.drop_reference = s.train->fixed_intercept || s.train->varying_intercept;
    for (const auto& t : spec->terms) {
      if (t.kind == TermKind::intercept) continue;
      switch (t.role) {
        case Role::fixed: s.fixed_terms.push_back(&t); break;
        case Role::varying: s.varying_terms.push_back(&t); break;
        case Role::random: s.random_terms.push_back(&t); break;
      }
    }
    s.lag_shifts = lag_shifts_of(name);

    // the prediction panel must expand to the same design columns the model
    // was fitted with, or draw columns would be misaligned
    for (int pass = 0; pass < 3; ++pass) {
      const Role role = static_cast<Role>(pass);
      std::vector<std::string> labels;
      if ((role == Role::fixed && s.train->fixed_intercept) ||
          (role == Role::random && spec->has_intercept(Role::random))) {
        labels.push_back("alpha");
      }
      const auto& terms = role == Role::fixed     ? s.fixed_terms
                          : role == Role::varying ? s.varying_terms
                                                  : s.random_terms;
      for (const Term* t : terms) {
        for (auto& l : term_column_labels(cx.panel, *t, s.drop_reference)) {
          labels.push_back(std::move(l));
        }
      }
      const auto& expect = role == Role::fixed     ? s.train->fixed_names
                           : role == Role::varying ? s.train->varying_names
                                                   : s.train->random_names;
      if (labels != expect) {
        throw spec_error("prediction data changes the design columns of "
                         "channel `" + name +
                         "`; check that categorical columns carry the same "
                         "level sets as the training data");
      }
    }

    const size_t cells =
        static_cast<size_t>(cx.panel.N()) * cx.panel.T();
    s.to_sim.assign(cells, 0);
    const Column& resp = cx.panel.column(name);
    for (int g = 0; g < cx.panel.N(); ++g) {
      for (int t = cx.sim_fixed; t < cx.panel.T(); ++t) {
        const size_t cell = cx.panel.cell(g, t);
        s.to_sim[cell] = resp.missing[cell];
      }
    }
    cx.steps.push_back({true, static_cast<int>(cx.stoch.size())});
    cx.stoch.push_back(std::move(s));
  }

  cx.pm = build_param_maps(fit);
  for (const auto& cc : cx.pm.chans) {
    for (int c0 : cc.nu0) cx.nu_col0.push_back(c0);
  }
  cx.sel = select_draws(fit.draws, n_draws);

  for (const auto& s : cx.stoch) {
    cx.mutable_cols.push_back(s.spec->response);
    for (int k : s.lag_shifts) {
      cx.mutable_cols.push_back(lag_column_name(s.spec->response, k));
    }
  }
  for (const auto& a : cx.aux) {
    cx.mutable_cols.push_back(a.spec->response);
    for (int k : a.lag_shifts) {
      cx.mutable_cols.push_back(lag_column_name(a.spec->response, k));
    }
  }
  cx.pristine = cx.panel;
  return cx;
}

// eta for one coefficient set at one cell; false when a predictor is missing
bool linear_predictor(const SimContext& cx, const StochRt& ch, int set,
                      const DrawView& dv, const Eigen::MatrixXd* nu_new,
                      int g, int t, double* out) {
  const SetCols& sc = cx.pm.chans[static_cast<size_t>(ch.ci)].sets[static_cast<size_t>(set)];
  const int tt = cx.t_train[static_cast<size_t>(t)];
  double eta = 0.0;

  if (ch.spec->offset) {
    const Column& oc = cx.panel.column(*ch.spec->offset);
    const size_t cell = cx.panel.cell(g, t);
    if (oc.missing[cell]) return false;
    eta += oc.values[cell];
  }

  std::vector<double> x;
  size_t j = 0;
  if (ch.train->fixed_intercept) eta += dv[sc.beta[j++]];
  for (const Term* term : ch.fixed_terms) {
    x.clear();
    if (!term_cell_values(cx.panel, *term, ch.drop_reference, g, t, x)) {
      return false;
    }
    for (double v : x) eta += v * dv[sc.beta[j++]];
  }

  if (ch.train->varying_intercept) {
    eta += dv[sc.alpha_t[static_cast<size_t>(tt)]];
  }
  size_t k = 0;
  for (const Term* term : ch.varying_terms) {
    x.clear();
    if (!term_cell_values(cx.panel, *term, ch.drop_reference, g, t, x)) {
      return false;
    }
    for (double v : x) eta += v * dv[sc.delta[k++][static_cast<size_t>(tt)]];
  }

  if (!ch.train->random_names.empty()) {
    const int gt = cx.g_train[static_cast<size_t>(g)];
    const int col0 = cx.fit->layout.channel_offsets()[static_cast<size_t>(ch.ci)].random_col0;
    auto nu_of = [&](size_t r) {
      const int m = col0 + static_cast<int>(r);
      if (gt >= 0) {
        return dv[cx.pm.chans[static_cast<size_t>(ch.ci)].nu0[r] + gt];
      }
      return (*nu_new)(g, m);
    };
    size_t r = 0;
    if (ch.spec->has_intercept(Role::random)) eta += nu_of(r++);
    for (const Term* term : ch.random_terms) {
      x.clear();
      if (!term_cell_values(cx.panel, *term, ch.drop_reference, g, t, x)) {
        return false;
      }
      for (double v : x) eta += v * nu_of(r++);
    }
  }

  *out = eta;
  return true;
}

// writes a simulated (or recomputed deterministic) value into the working
// panel and every lag column it feeds
void write_value(PanelData& panel, Column& col,
                 const std::vector<Column*>& lag_cols,
                 const std::vector<int>& shifts, int g, int t, double v,
                 bool miss) {
  const size_t cell = panel.cell(g, t);
  col.values[cell] = v;
  col.missing[cell] = miss ? 1 : 0;
  for (size_t i = 0; i < shifts.size(); ++i) {
    const int tl = t + shifts[i];
    if (tl >= panel.T()) continue;
    const size_t target = panel.cell(g, tl);
    lag_cols[i]->values[target] = v;
    lag_cols[i]->missing[target] = miss ? 1 : 0;
  }
}

// ---------------------------------------------------------------------------
// output frames
// ---------------------------------------------------------------------------

Frame::Col& add_col(Frame& f, const std::string& name) {
  auto& c = f.add(name);
  return c;
}

// .draw / group / time skeleton shared by all long outputs
void add_index_columns(Frame& f, const SimContext& cx, bool with_group) {
  add_col(f, ".draw");
  if (with_group && !cx.base.group_col.empty()) {
    auto& gc = add_col(f, cx.base.group_col);
    gc.levels = cx.base.group_ids;
  }
  add_col(f, cx.base.time_col);
}

struct Recorder {
  // per stochastic channel: first output column and width
  std::vector<int> first;
  std::vector<int> width;
  // per aux channel: output column
  std::vector<int> aux_col;
};

Recorder layout_recorded_columns(Frame& f, const SimContext& cx,
                                 PredictType type, const char* suffix_override) {
  Recorder rc;
  rc.first.assign(cx.stoch.size(), -1);
  rc.width.assign(cx.stoch.size(), 0);
  rc.aux_col.assign(cx.aux.size(), -1);
  for (const auto& step : cx.steps) {
    if (!step.stochastic) {
      const AuxRt& a = cx.aux[static_cast<size_t>(step.idx)];
      rc.aux_col[static_cast<size_t>(step.idx)] =
          static_cast<int>(f.columns.size());
      add_col(f, a.spec->response);
      continue;
    }
    const StochRt& s = cx.stoch[static_cast<size_t>(step.idx)];
    const std::string& r = s.spec->response;
    const bool cat = s.train->n_cat() > 0;
    rc.first[static_cast<size_t>(step.idx)] = static_cast<int>(f.columns.size());
    const std::string suffix =
        suffix_override ? suffix_override
        : type == PredictType::response ? "_new"
        : type == PredictType::mean     ? "_mean"
                                        : "_link";
    if (!cat) {
      add_col(f, r + suffix);
      rc.width[static_cast<size_t>(step.idx)] = 1;
    } else if (type == PredictType::response && !suffix_override) {
      auto& c = add_col(f, r + suffix);
      c.levels = s.train->categories;
      rc.width[static_cast<size_t>(step.idx)] = 1;
    } else {
      for (const auto& cat_name : s.train->categories) {
        add_col(f, r + suffix + "_" + cat_name);
      }
      rc.width[static_cast<size_t>(step.idx)] =
          static_cast<int>(s.train->categories.size());
    }
  }
  return rc;
}

void fill_index_columns(Frame& f, const SimContext& cx, size_t n_sel) {
  const int Ng = cx.base.N();
  const int T = cx.base.T();
  f.n_rows = n_sel * static_cast<size_t>(Ng) * T;
  for (auto& c : f.columns) {
    c.values.assign(f.n_rows, 0.0);
    c.missing.assign(f.n_rows, 1);
  }
  Frame::Col* dc = &f.columns[0];
  Frame::Col* gc = cx.base.group_col.empty() ? nullptr : &f.columns[1];
  Frame::Col* tc = gc ? &f.columns[2] : &f.columns[1];
  size_t row = 0;
  for (size_t d = 0; d < n_sel; ++d) {
    for (int g = 0; g < Ng; ++g) {
      for (int t = 0; t < T; ++t, ++row) {
        dc->values[row] = static_cast<double>(d + 1);
        dc->missing[row] = 0;
        if (gc) {
          gc->values[row] = g;
          gc->missing[row] = 0;
        }
        tc->values[row] = cx.base.time_values[static_cast<size_t>(t)];
        tc->missing[row] = 0;
      }
    }
  }
}

Frame observed_frame(const SimContext& cx) {
  Frame f;
  const int Ng = cx.base.N();
  const int T = cx.base.T();
  f.n_rows = static_cast<size_t>(Ng) * T;
  if (!cx.base.group_col.empty()) {
    auto& gc = f.add(cx.base.group_col);
    gc.levels = cx.base.group_ids;
  }
  f.add(cx.base.time_col);
  for (const auto& name : cx.base.column_order) {
    auto& c = f.add(name);
    c.levels = cx.base.columns.at(name).levels;
  }
  size_t row = 0;
  for (int g = 0; g < Ng; ++g) {
    for (int t = 0; t < T; ++t, ++row) {
      size_t ci = 0;
      if (!cx.base.group_col.empty()) {
        f.columns[ci].values[row] = g;
        f.columns[ci].missing[row] = 0;
        ++ci;
      }
      f.columns[ci].values[row] = cx.base.time_values[static_cast<size_t>(t)];
      f.columns[ci].missing[row] = 0;
      ++ci;
      const size_t cell = cx.base.cell(g, t);
      for (const auto& name : cx.base.column_order) {
        const Column& src = cx.base.columns.at(name);
        f.columns[ci].values[row] = src.values[cell];
        f.columns[ci].missing[row] = src.missing[cell];
        ++ci;
      }
    }
  }
  return f;
}

void merge_expanded(Frame& sim, const Frame& obs, size_t n_sel) {
  const size_t block = obs.n_rows;
  size_t skip = 0; // obs frame repeats its group/time leaders
  for (const auto& c : obs.columns) {
    if (sim.find(c.name)) {
      ++skip;
      continue;
    }
    auto& out = sim.add(c.name);
    out.levels = c.levels;
    out.values.assign(sim.n_rows, 0.0);
    out.missing.assign(sim.n_rows, 1);
    for (size_t d = 0; d < n_sel; ++d) {
      for (size_t i = 0; i < block; ++i) {
        out.values[d * block + i] = c.values[i];
        out.missing[d * block + i] = c.missing[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// funs reductions
// ---------------------------------------------------------------------------

struct FunAccum {
  const FunSpec* spec = nullptr;
  int stoch_idx = -1;
  std::vector<double> buffer; // values across groups for one (draw, time)
  bool saw_missing = false;

  void reset() {
    buffer.clear();
    saw_missing = false;
  }
  void push(double v, bool miss) {
    if (miss || std::isnan(v)) {
      saw_missing = true;
      return;
    }
    buffer.push_back(v);
  }
  double finish(bool* miss) const {
    if (saw_missing || buffer.empty()) {
      *miss = true;
      return 0.0;
    }
    *miss = false;
    const auto& f = spec->fun;
    if (f == "mean" || f == "sum") {
      double s = 0.0;
      for (double v : buffer) s += v;
      return f == "sum" ? s : s / static_cast<double>(buffer.size());
    }
    if (f == "sd") {
      if (buffer.size() < 2) return 0.0;
      double m = 0.0;
      for (double v : buffer) m += v;
      m /= static_cast<double>(buffer.size());
      double ss = 0.0;
      for (double v : buffer) ss += (v - m) * (v - m);
      return std::sqrt(ss / static_cast<double>(buffer.size() - 1));
    }
    if (f == "min") return *std::min_element(buffer.begin(), buffer.end());
    if (f == "max") return *std::max_element(buffer.begin(), buffer.end());
    return quantile_type7(buffer, f == "median" ? 0.5 : spec->prob);
  }
};

} // namespace

// ---------------------------------------------------------------------------
// Frame
// ---------------------------------------------------------------------------

Frame::Col& Frame::add(const std::string& name) {
  Col c;
  c.name = name;
  c.values.assign(n_rows, 0.0);
  c.missing.assign(n_rows, 1);
  columns.push_back(std::move(c));
  return columns.back();
}

const Frame::Col* Frame::find(const std::string& name) const {
  for (const auto& c : columns) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string frame_to_csv(const Frame& f) {
  std::ostringstream out;
  for (size_t c = 0; c < f.columns.size(); ++c) {
    if (c) out << ',';
    out << csv_field(f.columns[c].name);
  }
  out << '\n';
  for (size_t r = 0; r < f.n_rows; ++r) {
    for (size_t c = 0; c < f.columns.size(); ++c) {
      if (c) out << ',';
      const auto& col = f.columns[c];
      if (col.missing[r]) continue;
      if (!col.levels.empty()) {
        out << csv_field(col.levels[static_cast<size_t>(col.values[r])]);
      } else {
        out << fmt_num(col.values[r]);
      }
    }
    out << '\n';
  }
  return out.str();
}

void locf_column(Column& col, int N, int T) {
  for (int g = 0; g < N; ++g) {
    int last = -1;
    for (int t = 0; t < T; ++t) {
      const size_t cell = static_cast<size_t>(g) * T + t;
      if (!col.missing[cell]) {
        last = t;
        continue;
      }
      if (last >= 0) {
        const size_t src = static_cast<size_t>(g) * T + last;
        col.values[cell] = col.values[src];
        col.missing[cell] = 0;
      }
    }
  }
}

std::vector<FunSpec> parse_funs(const std::string& text) {
  std::vector<FunSpec> out;
  std::string entry;
  std::istringstream in(text);
  auto flush = [&](const std::string& e) {
    if (e.empty()) return;
    const auto colon = e.find(':');
    if (colon == std::string::npos) {
      throw spec_error("malformed funs entry `" + e +
                       "`; expected channel:function or "
                       "channel:label=function");
    }
    FunSpec fs;
    fs.channel = e.substr(0, colon);
    std::string rhs = e.substr(colon + 1);
    const auto eq = rhs.find('=');
    if (eq != std::string::npos) {
      fs.label = rhs.substr(0, eq);
      rhs = rhs.substr(eq + 1);
    }
    if (rhs.rfind("quantile(", 0) == 0 && rhs.back() == ')') {
      fs.fun = "quantile";
      const std::string num = rhs.substr(9, rhs.size() - 10);
      char* end = nullptr;
      fs.prob = std::strtod(num.c_str(), &end);
      if (end == num.c_str() || *end != '\0' || fs.prob <= 0.0 ||
          fs.prob >= 1.0) {
        throw spec_error("quantile probability `" + num +
                         "` must be a number in (0, 1)");
      }
      if (fs.label.empty()) fs.label = "q" + fmt_num(100.0 * fs.prob);
    } else {
      fs.fun = rhs;
      static const std::set<std::string> known = {"mean", "sd",  "min",
                                                  "max",  "sum", "median"};
      if (!known.count(fs.fun)) {
        throw spec_error("unknown summary function `" + fs.fun +
                         "`; available: mean, sd, min, max, median, sum, "
                         "quantile(p)");
      }
      if (fs.label.empty()) fs.label = fs.fun;
    }
    out.push_back(std::move(fs));
  };
  while (std::getline(in, entry, ',')) {
    std::istringstream semi(entry);
    std::string piece;
    while (std::getline(semi, piece, ';')) flush(piece);
  }
  return out;
}

// ---------------------------------------------------------------------------
// fitted
// ---------------------------------------------------------------------------

PredictionFrame fitted(const Fit& fit, const PanelData* newdata, int n_draws) {
  SimContext cx = make_context(fit, newdata, /*clear=*/false,
                               ImputeMethod::none, NewLevels::none, n_draws);
  const size_t n_sel = cx.sel.size();
  const int Ng = cx.base.N();
  const int T = cx.base.T();

  PredictionFrame out;
  out.expanded = false;
  add_index_columns(out.simulated, cx, true);
  Recorder rc = layout_recorded_columns(out.simulated, cx, PredictType::mean,
                                        "_fitted");
  fill_index_columns(out.simulated, cx, n_sel);

  std::vector<double> etas;
  std::vector<double> probs;
  for (size_t d = 0; d < n_sel; ++d) {
    const int pooled = cx.sel[d];
    DrawView dv{&fit.draws, pooled / fit.draws.n_iter,
                pooled % fit.draws.n_iter};
    for (int g = 0; g < Ng; ++g) {
      for (int t = 0; t < T; ++t) {
        const size_t row =
            (d * static_cast<size_t>(Ng) + g) * static_cast<size_t>(T) + t;
        for (size_t si = 0; si < cx.stoch.size(); ++si) {
          const StochRt& ch = cx.stoch[si];
          const int first = rc.first[si];
          const size_t cell = cx.panel.cell(g, t);
          const bool cat = ch.train->n_cat() > 0;
          if (!cat) {
            double eta = 0.0;
            if (!linear_predictor(cx, ch, 0, dv, nullptr, g, t, &eta)) continue;
            double trials = 0.0;
            if (ch.spec->trials) {
              const Column& tc = cx.panel.column(*ch.spec->trials);
              if (tc.missing[cell]) continue;
              trials = tc.values[cell];
            }
            auto& col = out.simulated.columns[static_cast<size_t>(first)];
            col.values[row] = family_mean(ch.train->family, eta, trials);
            col.missing[row] = 0;
          } else {
            etas.assign(static_cast<size_t>(ch.train->n_cat() - 1), 0.0);
            bool ok = true;
            for (int s = 0; ok && s < ch.train->n_cat() - 1; ++s) {
              ok = linear_predictor(cx, ch, s, dv, nullptr, g, t,
                                    &etas[static_cast<size_t>(s)]);
            }
            if (!ok) continue;
            categorical_probs(etas, probs);
            for (int l = 0; l < ch.train->n_cat(); ++l) {
              auto& col = out.simulated.columns[static_cast<size_t>(first + l)];
              col.values[row] = probs[static_cast<size_t>(l)];
              col.missing[row] = 0;
            }
          }
        }
        for (size_t ai = 0; ai < cx.aux.size(); ++ai) {
          const Column& src = cx.panel.column(cx.aux[ai].spec->response);
          const size_t cell = cx.panel.cell(g, t);
          auto& col =
              out.simulated.columns[static_cast<size_t>(rc.aux_col[ai])];
          col.values[row] = src.values[cell];
          col.missing[row] = src.missing[cell];
        }
      }
    }
  }
  out.observed = observed_frame(cx);
  return out;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

PredictionFrame predict(const Fit& fit, const PanelData* newdata,
                        const PredictOptions& opt) {
  const bool use_funs = !opt.funs.empty();
  SimContext cx = make_context(fit, newdata, /*clear=*/newdata == nullptr,
                               opt.impute, opt.new_levels, opt.n_draws);
  const DesignSet& ds = *fit.design;
  const size_t n_sel = cx.sel.size();
  const int Ng = cx.base.N();
  const int T = cx.base.T();
  const int M = ds.total_random();

  // validate funs against the model before any heavy work
  std::vector<FunAccum> accums;
  for (const auto& fs : opt.funs) {
    FunAccum fa;
    fa.spec = &fs;
    for (size_t si = 0; si < cx.stoch.size(); ++si) {
      if (cx.stoch[si].spec->response == fs.channel) {
        fa.stoch_idx = static_cast<int>(si);
      }
    }
    if (fa.stoch_idx < 0) {
      throw spec_error("funs reference unknown stochastic channel `" +
                       fs.channel + "`");
    }
    if (cx.stoch[static_cast<size_t>(fa.stoch_idx)].train->n_cat() > 0) {
      throw spec_error("summary functions are not defined for categorical "
                       "channel `" + fs.channel + "`");
    }
    accums.push_back(std::move(fa));
  }

  PredictionFrame out;
  Recorder rc;
  Frame funs_frame;
  if (use_funs) {
    funs_frame.n_rows = n_sel * static_cast<size_t>(T);
    add_col(funs_frame, ".draw");
    add_col(funs_frame, cx.base.time_col);
    for (const auto& fa : accums) {
      add_col(funs_frame, fa.spec->label + "_" + fa.spec->channel);
    }
    size_t row = 0;
    for (size_t d = 0; d < n_sel; ++d) {
      for (int t = 0; t < T; ++t, ++row) {
        funs_frame.columns[0].values[row] = static_cast<double>(d + 1);
        funs_frame.columns[0].missing[row] = 0;
        funs_frame.columns[1].values[row] =
            cx.base.time_values[static_cast<size_t>(t)];
        funs_frame.columns[1].missing[row] = 0;
      }
    }
  } else {
    add_index_columns(out.simulated, cx, true);
    rc = layout_recorded_columns(out.simulated, cx, opt.type, nullptr);
    fill_index_columns(out.simulated, cx, n_sel);
  }

  // per-(time, channel) scratch of recorded values when streaming into funs
  std::vector<std::vector<double>> rec_scratch(cx.stoch.size());
  std::vector<std::vector<uint8_t>> rec_scratch_miss(cx.stoch.size());
  for (auto& v : rec_scratch) v.assign(static_cast<size_t>(Ng), 0.0);
  for (auto& v : rec_scratch_miss) v.assign(static_cast<size_t>(Ng), 1);

  std::vector<Column*> mut_cols;
  std::vector<const Column*> mut_src;
  for (const auto& name : cx.mutable_cols) {
    mut_cols.push_back(&cx.panel.column(name));
    mut_src.push_back(&cx.pristine.column(name));
  }
  std::vector<std::vector<Column*>> stoch_lags(cx.stoch.size());
  std::vector<std::vector<Column*>> aux_lags(cx.aux.size());
  std::vector<Column*> stoch_col(cx.stoch.size());
  std::vector<Column*> aux_col(cx.aux.size());
  for (size_t si = 0; si < cx.stoch.size(); ++si) {
    stoch_col[si] = &cx.panel.column(cx.stoch[si].spec->response);
    for (int k : cx.stoch[si].lag_shifts) {
      stoch_lags[si].push_back(&cx.panel.column(
          lag_column_name(cx.stoch[si].spec->response, k)));
    }
  }
  for (size_t ai = 0; ai < cx.aux.size(); ++ai) {
    aux_col[ai] = &cx.panel.column(cx.aux[ai].spec->response);
    for (int k : cx.aux[ai].lag_shifts) {
      aux_lags[ai].push_back(
          &cx.panel.column(lag_column_name(cx.aux[ai].spec->response, k)));
    }
  }

  std::vector<double> etas, probs;
  Eigen::MatrixXd nu_new;
  for (size_t d = 0; d < n_sel; ++d) {
    const int pooled = cx.sel[d];
    DrawView dv{&fit.draws, pooled / fit.draws.n_iter,
                pooled % fit.draws.n_iter};

    // reset the working panel to the conditioned state
    for (size_t i = 0; i < mut_cols.size(); ++i) *mut_cols[i] = *mut_src[i];

    // materialize random effects for groups the fit never saw
    bool any_new = false;
    for (int gt : cx.g_train) any_new |= gt < 0;
    if (any_new && M > 0) {
      nu_new.setZero(Ng, M);
      for (int g = 0; g < Ng; ++g) {
        if (cx.g_train[static_cast<size_t>(g)] >= 0) continue;
        Rng rng(Rng::derive_key(opt.seed,
                                {1, static_cast<uint64_t>(pooled + 1),
                                 static_cast<uint64_t>(g + 1)}));
        if (opt.new_levels == NewLevels::bootstrap) {
          const int src = static_cast<int>(rng.below(
              static_cast<uint64_t>(ds.data.N())));
          for (int m = 0; m < M; ++m) {
            nu_new(g, m) = dv[cx.nu_col0[static_cast<size_t>(m)] + src];
          }
        } else { // gaussian: fresh effects from the estimated distribution
          Eigen::MatrixXd C = Eigen::MatrixXd::Identity(M, M);
          for (const auto& [a, b, col] : cx.pm.corr) {
            C(a, b) = C(b, a) = dv[col];
          }
          Eigen::MatrixXd L = C.llt().matrixL();
          Eigen::VectorXd z(M);
          for (int m = 0; m < M; ++m) z[m] = rng.normal();
          Eigen::VectorXd v = L * z;
          for (int m = 0; m < M; ++m) {
            nu_new(g, m) = dv[cx.pm.sigma_nu[static_cast<size_t>(m)]] * v[m];
          }
        }
      }
    }

    for (int t = 0; t < T; ++t) {
      const bool in_window = t >= cx.sim_fixed;
      for (const auto& step : cx.steps) {
        if (!step.stochastic) {
          if (!in_window) continue;
          const size_t ai = static_cast<size_t>(step.idx);
          const AuxRt& a = cx.aux[ai];
          for (int g = 0; g < Ng; ++g) {
            double v = 0.0;
            const bool ok = eval_aux_cell(cx.panel, *a.spec, g, t, &v);
            write_value(cx.panel, *aux_col[ai], aux_lags[ai], a.lag_shifts, g,
                        t, ok ? v : 0.0, !ok);
          }
          continue;
        }

        const size_t si = static_cast<size_t>(step.idx);
        const StochRt& ch = cx.stoch[si];
        const bool cat = ch.train->n_cat() > 0;
        for (int g = 0; g < Ng; ++g) {
          const size_t cell = cx.panel.cell(g, t);
          const size_t row =
              (d * static_cast<size_t>(Ng) + g) * static_cast<size_t>(T) + t;
          if (use_funs) rec_scratch_miss[si][static_cast<size_t>(g)] = 1;
          if (!in_window || !ch.to_sim[cell]) {
            // observed passthrough: nothing recorded in the _new column,
            // but funs still see the data value on the response scale
            if (use_funs && opt.type != PredictType::link &&
                !stoch_col[si]->missing[cell]) {
              rec_scratch[si][static_cast<size_t>(g)] =
                  stoch_col[si]->values[cell];
              rec_scratch_miss[si][static_cast<size_t>(g)] = 0;
            }
            continue;
          }

          Rng rng(Rng::derive_key(
              opt.seed, {0, static_cast<uint64_t>(pooled + 1),
                         static_cast<uint64_t>(g + 1),
                         static_cast<uint64_t>(t + 1),
                         static_cast<uint64_t>(ch.topo + 1)}));
          double drawn = 0.0;
          bool ok = true;
          double recorded = kNaN;
          if (!cat) {
            double eta = 0.0;
            ok = linear_predictor(cx, ch, 0, dv, &nu_new, g, t, &eta);
            if (ok) {
              double trials = 0.0;
              if (ch.spec->trials) {
                const Column& tc = cx.panel.column(*ch.spec->trials);
                if (tc.missing[cell]) {
                  ok = false;
                } else {
                  trials = tc.values[cell];
                }
              }
              if (ok) {
                const double aux_par =
                    cx.pm.chans[static_cast<size_t>(ch.ci)].aux >= 0
                        ? dv[cx.pm.chans[static_cast<size_t>(ch.ci)].aux]
                        : 0.0;
                drawn = family_draw(rng, ch.train->family, eta, aux_par,
                                    trials);
                recorded = opt.type == PredictType::response ? drawn
                           : opt.type == PredictType::mean
                               ? family_mean(ch.train->family, eta, trials)
                               : eta;
              }
            }
          } else {
            etas.assign(static_cast<size_t>(ch.train->n_cat() - 1), 0.0);
            for (int s = 0; ok && s < ch.train->n_cat() - 1; ++s) {
              ok = linear_predictor(cx, ch, s, dv, &nu_new, g, t,
                                    &etas[static_cast<size_t>(s)]);
            }
            if (ok) drawn = categorical_draw(rng, etas);
          }

          write_value(cx.panel, *stoch_col[si], stoch_lags[si], ch.lag_shifts,
                      g, t, ok ? drawn : 0.0, !ok);

          if (use_funs) {
            if (ok) {
              rec_scratch[si][static_cast<size_t>(g)] = recorded;
              rec_scratch_miss[si][static_cast<size_t>(g)] = 0;
            }
            continue;
          }
          const int first = rc.first[si];
          if (!ok) continue;
          if (!cat) {
            auto& col = out.simulated.columns[static_cast<size_t>(first)];
            col.values[row] = recorded;
            col.missing[row] = 0;
          } else if (opt.type == PredictType::response) {
            auto& col = out.simulated.columns[static_cast<size_t>(first)];
            col.values[row] = drawn;
            col.missing[row] = 0;
          } else {
            categorical_probs(etas, probs);
            for (int l = 0; l < ch.train->n_cat(); ++l) {
              auto& col =
                  out.simulated.columns[static_cast<size_t>(first + l)];
              col.values[row] = opt.type == PredictType::mean
                                    ? probs[static_cast<size_t>(l)]
                                    : (l == 0 ? 0.0
                                              : etas[static_cast<size_t>(l - 1)]);
              col.missing[row] = 0;
            }
          }
        }
      }

      if (use_funs) {
        const size_t row = d * static_cast<size_t>(T) + t;
        for (size_t fi = 0; fi < accums.size(); ++fi) {
          FunAccum& fa = accums[fi];
          fa.reset();
          const size_t si = static_cast<size_t>(fa.stoch_idx);
          for (int g = 0; g < Ng; ++g) {
            fa.push(rec_scratch[si][static_cast<size_t>(g)],
                    rec_scratch_miss[si][static_cast<size_t>(g)] != 0);
          }
          bool miss = true;
          const double v = fa.finish(&miss);
          auto& col = funs_frame.columns[2 + fi];
          col.values[row] = v;
          col.missing[row] = miss ? 1 : 0;
        }
      } else {
        // aux columns are recorded after the whole time step settles
        for (size_t ai = 0; ai < cx.aux.size(); ++ai) {
          for (int g = 0; g < Ng; ++g) {
            const size_t row =
                (d * static_cast<size_t>(Ng) + g) * static_cast<size_t>(T) +
                t;
            const size_t cell = cx.panel.cell(g, t);
            auto& col =
                out.simulated.columns[static_cast<size_t>(rc.aux_col[ai])];
            col.values[row] = aux_col[ai]->values[cell];
            col.missing[row] = aux_col[ai]->missing[cell];
          }
        }
      }
    }
  }

  if (use_funs) {
    out.simulated = std::move(funs_frame);
    out.observed = observed_frame(cx);
    out.expanded = false;
    return out;
  }

  out.observed = observed_frame(cx);
  if (opt.expand) {
    merge_expanded(out.simulated, out.observed, n_sel);
    out.expanded = true;
    out.observed = Frame{};
  }
  return out;
}

} // namespace dmp
