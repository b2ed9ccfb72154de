#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmpanel/fitio.hpp"

namespace dmp {

enum class PredictType { response, mean, link };
enum class ImputeMethod { none, locf };
enum class NewLevels { none, bootstrap, gaussian, original };

/// One summary function applied across groups within each (draw, time).
/// The output column is `<label>_<channel>`.
struct FunSpec {
  std::string channel;
  std::string fun;   // mean | sd | min | max | median | sum | quantile
  double prob = 0.5; // quantile only
  std::string label; // defaults to the function name, quantile to e.g. q90
};

struct PredictOptions {
  PredictType type = PredictType::response;
  std::vector<FunSpec> funs; // non-empty forces expand = false
  ImputeMethod impute = ImputeMethod::none;
  NewLevels new_levels = NewLevels::none;
  int n_draws = 0; // 0 = every posterior draw; fewer are thinned evenly
  bool expand = true;
  uint64_t seed = 1;
};

/// Columnar long table written as CSV. Categorical columns keep level
/// indices in `values` plus the level strings.
struct Frame {
  struct Col {
    std::string name;
    std::vector<double> values;
    std::vector<uint8_t> missing;
    std::vector<std::string> levels; // non-empty marks a categorical column
  };
  std::vector<Col> columns;
  std::size_t n_rows = 0;

  Col& add(const std::string& name);
  const Col* find(const std::string& name) const;
};

std::string frame_to_csv(const Frame& f);

/// predict / fitted output. With expand, simulated values and the input
/// data travel in one merged table (one row per draw, group, time);
/// otherwise `simulated` holds the per-draw rows and `observed` one row per
/// (group, time) of the input panel.
struct PredictionFrame {
  Frame simulated;
  Frame observed;
  bool expanded = false;
};

/// Expected responses per posterior draw, computed from observed history
/// only; cells whose predictors are incomplete come back missing. Writes
/// `<resp>_fitted` columns (per category for categorical channels).
PredictionFrame fitted(const Fit& fit, const PanelData* newdata = nullptr,
                       int n_draws = 0);

/// Multi-step posterior-predictive simulation. Missing response cells in
/// newdata (or everything after the conditioned window when newdata is
/// null) are filled channel by channel in topological order; simulated
/// values feed later channels and later time points, and deterministic
/// channels are recomputed along the way.
PredictionFrame predict(const Fit& fit, const PanelData* newdata,
                        const PredictOptions& opt);

/// Parses "g:mean,b:q90=quantile(0.9)" into specs (entries split on comma
/// or semicolon); used by the command line.
std::vector<FunSpec> parse_funs(const std::string& text);

/// Forward-fills missing cells from the nearest earlier observed value in
/// the same group; leading gaps stay missing.
void locf_column(Column& col, int N, int T);

} // namespace dmp
