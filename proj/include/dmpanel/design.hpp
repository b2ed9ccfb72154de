#pragma once

#include <Eigen/Dense>

#include "dmpanel/formula.hpp"
#include "dmpanel/panel.hpp"
#include "dmpanel/spline.hpp"

namespace dmp {

/// Assembled numeric design for one stochastic channel. Matrices span the
/// full (group, time) grid (row g * T + t); only rows with mask = 1 enter the
/// likelihood, the rest are zero-filled.
struct ChannelDesign {
  std::string response;
  Family family = Family::gaussian;

  std::vector<double> y;      // categorical responses store level indices
  std::vector<uint8_t> mask;
  Eigen::MatrixXd X_fixed;    // cells x K_fixed; leading "alpha" ones column
                              // when the channel has a constant intercept
  Eigen::MatrixXd X_varying;  // cells x K_varying; the time-varying intercept
                              // is a flag, not a column
  Eigen::MatrixXd X_random;   // cells x K_random, intercept column included
  std::vector<double> offset; // empty when absent
  std::vector<double> trials; // empty when absent

  bool fixed_intercept = false;
  bool varying_intercept = false;
  std::vector<std::string> fixed_names;
  std::vector<std::string> varying_names;
  std::vector<std::string> random_names; // "alpha" for the random intercept
  std::vector<std::string> categories;   // categorical response levels

  int K_fixed() const { return static_cast<int>(X_fixed.cols()); }
  int K_varying() const { return static_cast<int>(X_varying.cols()); }
  int K_random() const { return static_cast<int>(X_random.cols()); }
  int n_cat() const { return static_cast<int>(categories.size()); }
};

struct DesignSet {
  ModelFormula formula; // after expand_lags
  std::vector<std::string> topo_order;
  int fixed_points = 0;
  SplineBasis basis; // df = 0 when the model has no time-varying part
  std::vector<ChannelDesign> channels; // stochastic, in formula order
  PanelData data; // input panel augmented with aux and lag columns
  Warnings warnings;

  const ChannelDesign& channel(const std::string& response) const;
  int total_random() const; // M: random-effect columns summed over channels
};

/// Shifts a column by k time steps within each group; the first k cells per
/// group become missing.
Column apply_lag(const Column& col, int k, const PanelData& panel);

/// Evaluates a deterministic channel's expression row-wise over the panel.
/// `max_lag` is the deepest lag of this channel used anywhere in the model;
/// init/past seed the lag columns before the panel start.
Column evaluate_aux(const PanelData& panel, const ChannelSpec& spec,
                    Warnings& warnings);

/// Evaluates one cell of a deterministic channel, applying the declared
/// value type. Returns false when an operand is missing.
bool eval_aux_cell(const PanelData& panel, const ChannelSpec& spec, int g,
                   int t, double* out);

/// Materializes deterministic channels (in dependency order) and every lag
/// column the model uses, seeding deterministic-channel lags from init /
/// past. `f` must already be lag-expanded. Shared between design assembly
/// and prediction so both see identical derived columns.
void augment_panel(PanelData& panel, const ModelFormula& f,
                   const std::vector<std::string>& topo_order,
                   Warnings& warnings);

/// Labels of the design columns one term expands to: categorical dummies in
/// level order (reference dropped under an intercept), interactions crossed
/// left to right.
std::vector<std::string> term_column_labels(const PanelData& p,
                                            const Term& term,
                                            bool drop_reference);

/// The same columns evaluated at a single cell, appended to `out`. Returns
/// false without appending when any operand is missing. Kept in lockstep
/// with the matrix assembly so simulated cells see the exact fit-time
/// coding.
bool term_cell_values(const PanelData& p, const Term& term,
                      bool drop_reference, int g, int t,
                      std::vector<double>& out);

/// Full design assembly: expands lag shorthand, checks acyclicity, evaluates
/// aux channels, materializes lag columns, builds per-channel matrices with
/// first-level dummy coding, and computes masks.
DesignSet build_design(const ModelFormula& f, const PanelData& d);

/// Name of the materialized lag column for `var` at shift k.
std::string lag_column_name(const std::string& var, int k);

} // namespace dmp
