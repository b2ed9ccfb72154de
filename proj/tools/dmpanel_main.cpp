// Command-line front end: every subcommand is a thin wrapper over the
// library. File and parse problems exit 1, model specification problems 2,
// numeric failures 3; messages go to stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dmpanel/diagnostics.hpp"
#include "dmpanel/fitio.hpp"
#include "dmpanel/numfmt.hpp"
#include "dmpanel/posterior.hpp"
#include "dmpanel/predict.hpp"
#include "dmpanel/priors.hpp"

using namespace dmp;

namespace {

void emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
    return;
  }
  write_text_file(out_path, text);
}

std::string data_label(const std::string& path) {
  return std::filesystem::path(path).stem().string();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// options every model-building command shares
struct ModelArgs {
  std::string formula_path;
  std::string data_path;
  std::string time_col;
  std::string group_col;

  void attach(CLI::App* cmd) {
    cmd->add_option("--formula", formula_path, "Model formula file")
        ->required();
    cmd->add_option("--data", data_path, "Panel data CSV")->required();
    cmd->add_option("--time", time_col, "Time index column")->required();
    cmd->add_option("--group", group_col, "Group id column (optional)");
  }

  Fit prepare(const std::vector<PriorSpec>& priors = {}) const {
    const std::string formula = read_text_file(formula_path);
    auto panel =
        panel_from_csv(read_text_file(data_path), time_col, group_col);
    return prepare_fit(formula, std::move(panel), priors,
                       data_label(data_path));
  }
};

void print_warnings(const Warnings& warnings) {
  for (const auto& w : warnings) {
    std::fprintf(stderr, "warning: %s\n", w.c_str());
  }
}

PredictType parse_type(const std::string& s) {
  if (s == "response") return PredictType::response;
  if (s == "mean") return PredictType::mean;
  if (s == "link") return PredictType::link;
  throw spec_error("unknown prediction type `" + s +
                   "`; expected response, mean, or link");
}

ImputeMethod parse_impute(const std::string& s) {
  if (s == "none") return ImputeMethod::none;
  if (s == "locf") return ImputeMethod::locf;
  throw spec_error("unknown imputation method `" + s +
                   "`; expected none or locf");
}

NewLevels parse_new_levels(const std::string& s) {
  if (s == "none") return NewLevels::none;
  if (s == "bootstrap") return NewLevels::bootstrap;
  if (s == "gaussian") return NewLevels::gaussian;
  if (s == "original") return NewLevels::original;
  throw spec_error("unknown new_levels policy `" + s +
                   "`; expected none, bootstrap, gaussian, or original");
}

// truth table for simulate: two columns, parameter and value
std::map<std::string, double> read_values_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("parameter,value", 0) != 0) {
    throw io_error("values file `" + path +
                   "` must start with a parameter,value header");
  }
  std::map<std::string, double> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw io_error("values file `" + path + "` line " +
                     std::to_string(lineno) + " has no value field");
    }
    const std::string name = line.substr(0, comma);
    const std::string num = line.substr(comma + 1);
    char* end = nullptr;
    const double v = std::strtod(num.c_str(), &end);
    if (end == num.c_str() || *end != '\0') {
      throw io_error("values file `" + path + "` line " +
                     std::to_string(lineno) + ": `" + num +
                     "` is not a number");
    }
    out[name] = v;
  }
  return out;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Estimation and simulation of dynamic multivariate panel models"};
  app.require_subcommand(1);

  // ---- fit -----------------------------------------------------------
  auto* fit_cmd = app.add_subcommand(
      "fit", "Sample the posterior and write a fit artifact directory");
  fit_cmd->set_config("--config", "",
                      "Key=value file supplying defaults for these flags");
  ModelArgs fit_model;
  fit_model.attach(fit_cmd);
  std::string fit_priors_path, fit_out;
  SamplerConfig sampler;
  fit_cmd->add_option("--priors", fit_priors_path,
                      "Prior table CSV replacing the defaults");
  fit_cmd->add_option("--chains", sampler.chains, "Number of MCMC chains");
  fit_cmd->add_option("--iter-warmup", sampler.iter_warmup,
                      "Warmup iterations per chain");
  fit_cmd->add_option("--iter-sampling", sampler.iter_sampling,
                      "Post-warmup iterations per chain");
  fit_cmd->add_option("--seed", sampler.seed, "Sampler seed");
  fit_cmd->add_option("--target-accept", sampler.target_accept,
                      "Step size adaptation target in (0, 1)");
  fit_cmd->add_option("--max-treedepth", sampler.max_treedepth,
                      "Trajectory doubling limit");
  fit_cmd->add_option("--cores", sampler.cores,
                      "Chain-level threads (never changes results)");
  fit_cmd->add_option("--out", fit_out, "Artifact directory")->required();
  fit_cmd->callback([&] {
    std::vector<PriorSpec> overrides;
    if (!fit_priors_path.empty()) {
      overrides = priors_from_csv(read_text_file(fit_priors_path));
    }
    Fit fit = fit_model.prepare(overrides);
    fit.config = sampler;
    print_warnings(fit.warnings);
    run_fit(fit);
    save_fit(fit, fit_out);
    const auto report = diagnose(fit.draws, fit.config.max_treedepth);
    std::fputs(fit_summary(fit.design->formula, fit.data_name, fit.layout,
                           fit.draws, report)
                   .c_str(),
               stdout);
  });

  // ---- priors --------------------------------------------------------
  auto* priors_cmd = app.add_subcommand(
      "priors", "Print the default prior table for a model as editable CSV");
  priors_cmd->set_config("--config");
  ModelArgs priors_model;
  priors_model.attach(priors_cmd);
  std::string priors_out;
  priors_cmd->add_option("--out", priors_out, "Output file (default stdout)");
  priors_cmd->callback([&] {
    Fit fit = priors_model.prepare();
    emit(priors_out, priors_to_csv(fit.priors));
  });

  // ---- summary -------------------------------------------------------
  auto* summary_cmd = app.add_subcommand(
      "summary", "Report a saved fit: text overview or parameter tables");
  summary_cmd->set_config("--config");
  std::string sum_fit_dir, sum_out, sum_types, sum_responses, sum_params,
      sum_probs;
  bool sum_csv = false, sum_raw = false, sum_drop_fixed = false;
  summary_cmd->add_option("--fit", sum_fit_dir, "Fit artifact directory")
      ->required();
  summary_cmd->add_flag("--csv", sum_csv,
                        "Pooled mean/sd/quantile table as CSV");
  summary_cmd->add_flag("--raw", sum_raw, "Every draw as long-format CSV");
  summary_cmd->add_option("--types", sum_types,
                          "Comma-separated parameter types to keep");
  summary_cmd->add_option("--responses", sum_responses,
                          "Comma-separated response channels to keep");
  summary_cmd->add_option("--parameters", sum_params,
                          "Comma-separated parameter names to keep");
  summary_cmd->add_option("--probs", sum_probs,
                          "Quantile probabilities for --csv (default "
                          "0.05,0.95)");
  summary_cmd->add_flag("--drop-fixed", sum_drop_fixed,
                        "Drop time points before the first simulatable one");
  summary_cmd->add_option("--out", sum_out, "Output file (default stdout)");
  summary_cmd->callback([&] {
    Fit fit = load_fit(sum_fit_dir);
    if (!sum_csv && !sum_raw) {
      const auto report = diagnose(fit.draws, fit.config.max_treedepth);
      emit(sum_out, fit_summary(fit.design->formula, fit.data_name,
                                fit.layout, fit.draws, report));
      return;
    }
    ExtractOptions opt;
    opt.summary = sum_csv;
    opt.types = split_list(sum_types);
    opt.responses = split_list(sum_responses);
    opt.parameters = split_list(sum_params);
    opt.include_fixed = !sum_drop_fixed;
    if (!sum_probs.empty()) {
      opt.probs.clear();
      for (const auto& p : split_list(sum_probs)) {
        char* end = nullptr;
        const double v = std::strtod(p.c_str(), &end);
        if (end == p.c_str() || *end != '\0' || v <= 0.0 || v >= 1.0) {
          throw spec_error("quantile probability `" + p +
                           "` must be a number in (0, 1)");
        }
        opt.probs.push_back(v);
      }
    }
    emit(sum_out, extract_to_csv(extract(fit.draws, fit.layout, opt)));
  });

  // ---- diagnostics ---------------------------------------------------
  auto* diag_cmd = app.add_subcommand(
      "diagnostics", "Convergence and sampler-health report for a saved fit");
  diag_cmd->set_config("--config");
  std::string diag_fit_dir, diag_out;
  int diag_worst = 3;
  diag_cmd->add_option("--fit", diag_fit_dir, "Fit artifact directory")
      ->required();
  diag_cmd->add_option("--worst", diag_worst,
                       "How many worst parameters to list per measure");
  diag_cmd->add_option("--out", diag_out, "Output file (default stdout)");
  diag_cmd->callback([&] {
    Fit fit = load_fit(diag_fit_dir);
    const auto report = diagnose(fit.draws, fit.config.max_treedepth);
    emit(diag_out, diagnostics_text(report, diag_worst));
  });

  // ---- fitted --------------------------------------------------------
  auto* fitted_cmd = app.add_subcommand(
      "fitted", "Per-draw conditional means given the observed history");
  fitted_cmd->set_config("--config");
  std::string fitted_fit_dir, fitted_newdata, fitted_out;
  int fitted_n_draws = 0;
  fitted_cmd->add_option("--fit", fitted_fit_dir, "Fit artifact directory")
      ->required();
  fitted_cmd->add_option("--newdata", fitted_newdata,
                         "Alternative panel CSV (default: training data)");
  fitted_cmd->add_option("--n-draws", fitted_n_draws,
                         "Thin to this many posterior draws (0 = all)");
  fitted_cmd->add_option("--out", fitted_out, "Output file (default stdout)");
  fitted_cmd->callback([&] {
    Fit fit = load_fit(fitted_fit_dir);
    PanelData nd;
    const PanelData* ndp = nullptr;
    if (!fitted_newdata.empty()) {
      nd = panel_from_csv(read_text_file(fitted_newdata),
                          fit.input.time_col, fit.input.group_col);
      ndp = &nd;
    }
    auto out = fitted(fit, ndp, fitted_n_draws);
    emit(fitted_out, frame_to_csv(out.simulated));
  });

  // ---- predict -------------------------------------------------------
  auto* predict_cmd = app.add_subcommand(
      "predict",
      "Simulate responses forward through the model's dynamics, one "
      "trajectory per posterior draw");
  predict_cmd->set_config("--config");
  std::string pr_fit_dir, pr_newdata, pr_out, pr_observed_out;
  std::string pr_type = "response", pr_impute = "none",
              pr_new_levels = "none", pr_funs;
  PredictOptions pr_opt;
  bool pr_no_expand = false;
  predict_cmd->add_option("--fit", pr_fit_dir, "Fit artifact directory")
      ->required();
  predict_cmd->add_option("--newdata", pr_newdata,
                          "Panel CSV; empty response cells are simulated "
                          "(default: training data with responses cleared "
                          "after the fixed time points)");
  predict_cmd->add_option("--type", pr_type,
                          "Recorded scale: response, mean, or link");
  predict_cmd->add_option("--funs", pr_funs,
                          "Per-time summaries over groups, e.g. "
                          "\"y:mean,y:q90=quantile(0.9)\"; replaces the "
                          "per-group output");
  predict_cmd->add_option("--impute", pr_impute,
                          "Covariate gap handling: none or locf");
  predict_cmd->add_option("--new-levels", pr_new_levels,
                          "Random effects for unseen groups: none, "
                          "bootstrap, gaussian, or original");
  predict_cmd->add_option("--n-draws", pr_opt.n_draws,
                          "Thin to this many posterior draws (0 = all)");
  predict_cmd->add_flag("--no-expand", pr_no_expand,
                        "Do not repeat input columns into the output");
  predict_cmd->add_option("--seed", pr_opt.seed, "Simulation seed");
  predict_cmd->add_option("--out", pr_out, "Output file (default stdout)");
  predict_cmd->add_option("--observed-out", pr_observed_out,
                          "Also write the effective input panel here");
  predict_cmd->callback([&] {
    Fit fit = load_fit(pr_fit_dir);
    pr_opt.type = parse_type(pr_type);
    pr_opt.impute = parse_impute(pr_impute);
    pr_opt.new_levels = parse_new_levels(pr_new_levels);
    if (!pr_funs.empty()) pr_opt.funs = parse_funs(pr_funs);
    pr_opt.expand = !pr_no_expand;
    PanelData nd;
    const PanelData* ndp = nullptr;
    if (!pr_newdata.empty()) {
      nd = panel_from_csv(read_text_file(pr_newdata), fit.input.time_col,
                          fit.input.group_col);
      ndp = &nd;
    }
    auto out = predict(fit, ndp, pr_opt);
    emit(pr_out, frame_to_csv(out.simulated));
    if (!pr_observed_out.empty() && out.observed.n_rows > 0) {
      write_text_file(pr_observed_out, frame_to_csv(out.observed));
    }
  });

  // ---- simulate ------------------------------------------------------
  auto* sim_cmd = app.add_subcommand(
      "simulate",
      "Generate a synthetic panel from a model at known parameter values: "
      "responses after the fixed time points are drawn from the generative "
      "process, the rest of the skeleton is kept");
  sim_cmd->set_config("--config");
  ModelArgs sim_model;
  sim_model.attach(sim_cmd);
  std::string sim_values_path, sim_out, sim_truth_out;
  uint64_t sim_seed = 1;
  sim_cmd->add_option("--values", sim_values_path,
                      "CSV of parameter,value rows; omitted parameters "
                      "default to 1 (scales) or 0 and are reported");
  sim_cmd->add_option("--seed", sim_seed, "Simulation seed");
  sim_cmd->add_option("--out", sim_out, "Panel CSV (default stdout)");
  sim_cmd->add_option("--truth-out", sim_truth_out,
                      "Write the full ground-truth parameter table here");
  sim_cmd->callback([&] {
    Fit fit = sim_model.prepare();
    std::map<std::string, double> values;
    if (!sim_values_path.empty()) values = read_values_csv(sim_values_path);
    Warnings warn;
    fit.draws = draws_from_values(fit.layout, values, &warn);
    print_warnings(warn);

    PredictOptions opt;
    opt.seed = sim_seed;
    opt.expand = false;
    auto sim = predict(fit, nullptr, opt);

    // splice the simulated responses back into the skeleton panel
    PanelData panel = fit.input;
    const int T = panel.T();
    for (const auto& spec : fit.design->formula.channels) {
      if (!spec.is_stochastic()) continue;
      const Frame::Col* col = sim.simulated.find(spec.response + "_new");
      if (!col) continue;
      Column& dst = panel.column(spec.response);
      for (int g = 0; g < panel.N(); ++g) {
        for (int t = 0; t < T; ++t) {
          const size_t row =
              static_cast<size_t>(g) * static_cast<size_t>(T) +
              static_cast<size_t>(t);
          if (col->missing[row]) continue;
          dst.values[panel.cell(g, t)] = col->values[row];
          dst.missing[panel.cell(g, t)] = 0;
        }
      }
    }
    std::ostringstream panel_csv;
    write_panel(panel, panel_csv);
    emit(sim_out, panel_csv.str());

    if (!sim_truth_out.empty()) {
      std::string truth = "parameter,value\n";
      for (size_t j = 0; j < fit.draws.names.size(); ++j) {
        truth += fit.draws.names[j] + ',' +
                 fmt_num(fit.draws.chains[0](0, static_cast<Eigen::Index>(j))) +
                 '\n';
      }
      write_text_file(sim_truth_out, truth);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
