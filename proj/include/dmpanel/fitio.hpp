#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dmpanel/design.hpp"
#include "dmpanel/nuts.hpp"
#include "dmpanel/panel.hpp"
#include "dmpanel/params.hpp"
#include "dmpanel/priors.hpp"

namespace dmp {

/// One estimation run end to end: the model bound to its data, the prior
/// table in effect, sampler settings, and (after run_fit) the draws. The
/// design sits on the heap because the layout's registry closures bind to
/// its address; keeping it behind a pointer leaves Fit movable.
struct Fit {
  std::string formula_text; // verbatim user formula
  PanelData input;          // panel exactly as loaded, before augmentation
  std::unique_ptr<DesignSet> design;
  ParamLayout layout;
  std::vector<PriorSpec> priors;
  SamplerConfig config;
  Draws draws;
  std::string data_name = "data";
  Warnings warnings; // data + design notes, then sampler notes after run_fit
};

/// Parses the formula against the data and assembles the design, the
/// parameter layout, and default priors with any user rows applied on top.
/// Does not sample.
Fit prepare_fit(const std::string& formula_text, PanelData data,
                const std::vector<PriorSpec>& prior_overrides = {},
                const std::string& data_name = "data");

/// Runs the sampler under fit.config, storing draws and sampler warnings.
void run_fit(Fit& fit);

/// Writes the self-describing artifact directory: formula.dml, data.csv,
/// priors.csv, draws.csv, meta.json, summary.txt. Requires a completed fit.
void save_fit(const Fit& fit, const std::string& dir);

/// Rebuilds a Fit from a save_fit directory. The hash stored in meta.json
/// must match the formula/priors/data bytes on disk, so edited artifacts
/// are rejected instead of silently reinterpreted.
Fit load_fit(const std::string& dir);

/// Draw matrix serialization used inside the artifact: full 17-digit
/// precision, chain-major rows, sampler statistics before parameters.
/// Exposed so determinism checks can compare files byte for byte.
std::string draws_to_csv(const Draws& d);

/// Inverse of draws_to_csv. When expect_names is non-empty the parameter
/// columns must match it exactly (same names, same order).
Draws draws_from_csv(const std::string& text,
                     const std::vector<std::string>& expect_names = {});

/// Single-draw posterior built from explicit parameter values, for
/// simulating data from a model at known coefficients. Parameters absent
/// from the map default to 1 when positivity-constrained (sigma, phi, tau,
/// sigma_nu) and 0 otherwise; each default is reported through `warn`.
/// Names that do not belong to the model are an error.
Draws draws_from_values(const ParamLayout& layout,
                        const std::map<std::string, double>& values,
                        Warnings* warn = nullptr);

/// FNV-1a over the artifact's formula, prior table, and data bytes.
uint64_t model_hash(const std::string& formula_text,
                    const std::string& priors_csv,
                    const std::string& data_csv);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

} // namespace dmp
