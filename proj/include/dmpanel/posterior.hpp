#pragma once

#include <string>
#include <vector>

#include "dmpanel/diagnostics.hpp"
#include "dmpanel/nuts.hpp"
#include "dmpanel/params.hpp"

namespace dmp {

/// Structured view of a parameter label. Rendering is injective over a
/// model's registry; `index` holds the 1-based time position for alpha/delta
/// and the basis column for omega, -1 when the label carries no bracket.
struct ParameterName {
  std::string type;
  std::string response;
  std::string predictor; // term label; for corr_nu the joined column pair
  int index = -1;
  std::string group;     // rendered group label, nu only
  std::string category;

  std::string render() const;
  bool operator==(const ParameterName& other) const = default;
};

/// Recovers the structured form of a registry-rendered label. Throws for
/// names the registry does not contain.
ParameterName parse_parameter_name(const std::string& name,
                                   const std::vector<RegistryEntry>& registry);

std::vector<std::string> parameter_types();

struct ExtractOptions {
  std::vector<std::string> parameters; // empty = no filter
  std::vector<std::string> responses;
  std::vector<std::string> types;
  bool summary = false;
  std::vector<double> probs = {0.05, 0.95};
  bool include_fixed = true;
};

/// Long table of draws or per-parameter summaries. Identity columns mirror
/// the registry; `time` carries the original time value (NaN when the
/// parameter is time-invariant).
struct ExtractTable {
  bool summary = false;
  std::vector<double> probs;

  std::vector<std::string> parameter;
  std::vector<std::string> response;
  std::vector<std::string> type;
  std::vector<std::string> category;
  std::vector<std::string> group;
  std::vector<double> time;

  // summary = false
  std::vector<int> chain;     // 1-based
  std::vector<int> iteration; // 1-based within chain
  std::vector<double> value;

  // summary = true
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<std::vector<double>> quantiles; // quantiles[j] follows probs[j]

  std::size_t n_rows() const { return parameter.size(); }
};

ExtractTable extract(const Draws& d, const ParamLayout& layout, const ExtractOptions& opt);

std::string extract_to_csv(const ExtractTable& t);

/// The printed model report: formula table, data dimensions, worst
/// convergence measures, per-chain timings, and the summary table of
/// time-invariant parameters (random effects and spline coefficients
/// excluded).
std::string fit_summary(const ModelFormula& formula, const std::string& data_name,
                        const ParamLayout& layout, const Draws& draws,
                        const DiagnosticsReport& report);

/// The sampler-health report: divergence / saturation / energy flags plus
/// the n worst parameters by each convergence measure.
std::string diagnostics_text(const DiagnosticsReport& report, int n = 3);

} // namespace dmp
