#include "dmpanel/posterior.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "dmpanel/names.hpp"
#include "dmpanel/numfmt.hpp"

namespace dmp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

int bracket_index(const std::string& name) {
  if (name.empty() || name.back() != ']') return -1;
  const std::size_t open = name.rfind('[');
  if (open == std::string::npos) return -1;
  return std::stoi(name.substr(open + 1, name.size() - open - 2));
}

std::string prob_label(double p) {
  std::string digits = fmt_num(100.0 * p);
  return "q" + digits;
}

double vec_mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double vec_sd(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  const double m = vec_mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / (static_cast<double>(x.size()) - 1.0));
}

double vec_mad(const std::vector<double>& x) {
  const double med = quantile_type7(x, 0.5);
  std::vector<double> dev;
  dev.reserve(x.size());
  for (double v : x) dev.push_back(std::fabs(v - med));
  return 1.4826 * quantile_type7(std::move(dev), 0.5);
}

// fixed-width helpers for the plain-text report tables
std::string lpad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}
std::string rpad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

std::string sig3(double x) {
  if (std::isnan(x)) return "NA";
  std::ostringstream os;
  os << std::setprecision(3) << x;
  return os.str();
}

std::string ess_text(double x) {
  if (std::isnan(x)) return "NA";
  return std::to_string(static_cast<long>(std::lround(x)));
}

} // namespace

std::vector<std::string> parameter_types() {
  return {"alpha", "beta",     "delta", "nu",      "tau",  "tau_alpha",
          "sigma", "sigma_nu", "phi",   "corr_nu", "omega"};
}

std::string ParameterName::render() const {
  auto with_index = [&](std::string base) {
    if (index >= 1) base += "[" + std::to_string(index) + "]";
    return base;
  };
  if (type == "alpha") return with_index(scalar_name("alpha", response, category));
  if (type == "beta") return coef_name("beta", response, predictor, category);
  if (type == "delta") return with_index(coef_name("delta", response, predictor, category));
  if (type == "nu") return coef_name("nu", response, predictor) + "_" + group;
  if (type == "tau") return coef_name("tau", response, predictor, category);
  if (type == "tau_alpha") return scalar_name("tau_alpha", response, category);
  if (type == "sigma") return scalar_name("sigma", response);
  if (type == "sigma_nu") return coef_name("sigma_nu", response, predictor);
  if (type == "phi") return scalar_name("phi", response);
  if (type == "corr_nu") return "corr_nu_" + predictor;
  if (type == "omega") {
    if (predictor.empty()) return with_index(scalar_name("omega_alpha", response, category));
    return with_index(coef_name("omega", response, predictor, category));
  }
  throw spec_error("cannot render parameter of unknown type `" + type + "`");
}

ParameterName parse_parameter_name(const std::string& name,
                                   const std::vector<RegistryEntry>& registry) {
  const RegistryEntry* hit = nullptr;
  for (const auto& e : registry) {
    if (e.name == name) {
      hit = &e;
      break;
    }
  }
  if (!hit) throw spec_error("unknown parameter `" + name + "`");

  ParameterName out;
  out.type = hit->type;
  out.response = hit->response;
  out.predictor = hit->predictor;
  out.category = hit->category;
  out.index = bracket_index(name);
  if (hit->type == "nu") {
    const std::string prefix = coef_name("nu", hit->response, hit->predictor) + "_";
    out.group = name.substr(prefix.size());
  } else if (hit->type == "corr_nu") {
    out.predictor = name.substr(std::string("corr_nu_").size());
  }
  return out;
}

ExtractTable extract(const Draws& d, const ParamLayout& layout, const ExtractOptions& opt) {
  const auto& registry = layout.registry();
  const DesignSet& ds = layout.design();

  const auto valid_types = parameter_types();
  for (const auto& t : opt.types) {
    if (std::find(valid_types.begin(), valid_types.end(), t) == valid_types.end())
      throw spec_error("unknown parameter type `" + t + "`; valid types are: " +
                       join(valid_types, ", "));
  }
  std::vector<std::string> responses;
  for (const auto& c : ds.channels) responses.push_back(c.response);
  for (const auto& r : opt.responses) {
    if (std::find(responses.begin(), responses.end(), r) == responses.end())
      throw spec_error("unknown response `" + r + "`; the model responses are: " +
                       join(responses, ", "));
  }
  std::set<std::string> known_names;
  for (const auto& e : registry) known_names.insert(e.name);
  for (const auto& p : opt.parameters) {
    if (!known_names.count(p))
      throw spec_error("unknown parameter `" + p + "`; available parameters are: " +
                       join(std::vector<std::string>(known_names.begin(), known_names.end()),
                            ", "));
  }
  for (double p : opt.probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw spec_error("quantile probabilities must lie in [0, 1]");
  }

  std::map<std::string, int> col_of;
  for (std::size_t i = 0; i < d.names.size(); ++i) col_of[d.names[i]] = static_cast<int>(i);

  const std::set<std::string> want_params(opt.parameters.begin(), opt.parameters.end());
  const std::set<std::string> want_resp(opt.responses.begin(), opt.responses.end());
  const std::set<std::string> want_types(opt.types.begin(), opt.types.end());

  ExtractTable table;
  table.summary = opt.summary;
  table.probs = opt.probs;
  if (opt.summary) table.quantiles.resize(opt.probs.size());

  std::vector<double> pooled;
  for (const auto& e : registry) {
    if (!want_params.empty() && !want_params.count(e.name)) continue;
    if (!want_resp.empty() && !want_resp.count(e.response)) continue;
    if (!want_types.empty() && !want_types.count(e.type)) continue;
    if (!opt.include_fixed && e.time >= 1 && e.time <= ds.fixed_points) continue;
    auto it = col_of.find(e.name);
    if (it == col_of.end()) continue; // draws saved under an older registry
    const int col = it->second;
    const double time_value = e.time >= 1 ? ds.data.time_values[static_cast<size_t>(e.time - 1)]
                                          : kNaN;

    auto push_identity = [&]() {
      table.parameter.push_back(e.name);
      table.response.push_back(e.response);
      table.type.push_back(e.type);
      table.category.push_back(e.category);
      table.group.push_back(e.group);
      table.time.push_back(time_value);
    };

    if (!opt.summary) {
      for (int c = 0; c < d.n_chains; ++c) {
        for (int i = 0; i < d.n_iter; ++i) {
          push_identity();
          table.chain.push_back(c + 1);
          table.iteration.push_back(i + 1);
          table.value.push_back(d.chains[c](i, col));
        }
      }
    } else {
      pooled.clear();
      pooled.reserve(static_cast<std::size_t>(d.n_chains) * d.n_iter);
      for (int c = 0; c < d.n_chains; ++c)
        for (int i = 0; i < d.n_iter; ++i) pooled.push_back(d.chains[c](i, col));
      push_identity();
      table.mean.push_back(vec_mean(pooled));
      table.sd.push_back(vec_sd(pooled));
      for (std::size_t j = 0; j < opt.probs.size(); ++j)
        table.quantiles[j].push_back(quantile_type7(pooled, opt.probs[j]));
    }
  }
  return table;
}

std::string extract_to_csv(const ExtractTable& t) {
  std::ostringstream out;
  out << "parameter,";
  if (t.summary) {
    out << "mean,sd";
    for (double p : t.probs) out << ',' << prob_label(p);
  } else {
    out << "chain,iteration,value";
  }
  out << ",time,group,category,response,type\n";

  for (std::size_t r = 0; r < t.n_rows(); ++r) {
    out << csv_field(t.parameter[r]) << ',';
    if (t.summary) {
      out << fmt_num(t.mean[r]) << ',' << fmt_num(t.sd[r]);
      for (std::size_t j = 0; j < t.probs.size(); ++j) out << ',' << fmt_num(t.quantiles[j][r]);
    } else {
      out << t.chain[r] << ',' << t.iteration[r] << ',' << fmt_num(t.value[r]);
    }
    out << ',' << (std::isnan(t.time[r]) ? "" : fmt_num(t.time[r]));
    out << ',' << csv_field(t.group[r]) << ',' << csv_field(t.category[r]) << ','
        << csv_field(t.response[r]) << ',' << csv_field(t.type[r]) << '\n';
  }
  return out.str();
}

std::string fit_summary(const ModelFormula& formula, const std::string& data_name,
                        const ParamLayout& layout, const Draws& draws,
                        const DiagnosticsReport& report) {
  const DesignSet& ds = layout.design();
  std::ostringstream out;

  out << "Model:\n" << format_channel_table(formula) << "\n";

  std::vector<std::string> random_responses;
  for (const auto& c : ds.channels)
    if (c.K_random() > 0) random_responses.push_back(c.response);
  if (!random_responses.empty()) {
    const bool correlated = formula.random_spec_or_default().correlated;
    out << (correlated ? "Correlated" : "Uncorrelated")
        << " random effects added for response(s): " << join(random_responses, ", ") << "\n\n";
  }

  const long n_obs =
      static_cast<long>(ds.data.N()) * (ds.data.T() - ds.fixed_points);
  out << "Data: " << data_name << " (Number of observations: " << n_obs << ")\n";
  out << "Grouping variable: " << (ds.data.group_col.empty() ? "(none)" : ds.data.group_col)
      << " (Number of groups: " << ds.data.N() << ")\n";
  out << "Time index variable: " << ds.data.time_col
      << " (Number of time points: " << ds.data.T() << ")\n\n";

  const ParamDiag* bulk = report.worst_ess_bulk();
  const ParamDiag* tail = report.worst_ess_tail();
  const ParamDiag* rhat = report.worst_rhat();
  if (bulk) out << "Smallest bulk-ESS: " << ess_text(bulk->ess_bulk) << " (" << bulk->name << ")\n";
  if (tail) out << "Smallest tail-ESS: " << ess_text(tail->ess_tail) << " (" << tail->name << ")\n";
  if (rhat) {
    std::ostringstream rh;
    rh << std::fixed << std::setprecision(3) << rhat->rhat;
    out << "Largest Rhat: " << rh.str() << " (" << rhat->name << ")\n";
  }

  out << "\nElapsed time (seconds):\n";
  std::size_t label_w = 7;
  for (int c = 0; c < draws.n_chains; ++c)
    label_w = std::max(label_w, ("chain:" + std::to_string(c + 1)).size());
  out << std::string(label_w, ' ') << lpad("warmup", 8) << lpad("sample", 8) << "\n";
  for (int c = 0; c < draws.n_chains; ++c) {
    std::ostringstream w, s;
    w << std::fixed << std::setprecision(3)
      << (c < static_cast<int>(draws.warmup_seconds.size()) ? draws.warmup_seconds[c] : 0.0);
    s << std::fixed << std::setprecision(3)
      << (c < static_cast<int>(draws.sample_seconds.size()) ? draws.sample_seconds[c] : 0.0);
    out << rpad("chain:" + std::to_string(c + 1), label_w) << lpad(w.str(), 8)
        << lpad(s.str(), 8) << "\n";
  }

  out << "\nSummary statistics of the time-invariant parameters\n"
      << "(excluding random effects):\n";

  std::map<std::string, const ParamDiag*> diag_of;
  for (const auto& p : report.params) diag_of[p.name] = &p;
  std::map<std::string, int> col_of;
  for (std::size_t i = 0; i < draws.names.size(); ++i)
    col_of[draws.names[i]] = static_cast<int>(i);

  std::vector<std::array<std::string, 10>> rows;
  rows.push_back({"variable", "mean", "median", "sd", "mad", "q5", "q95", "rhat", "ess_bulk",
                  "ess_tail"});
  std::vector<double> pooled;
  for (const auto& e : layout.registry()) {
    if (e.time >= 1 || e.type == "nu" || e.type == "omega") continue;
    auto it = col_of.find(e.name);
    if (it == col_of.end()) continue;
    pooled.clear();
    for (int c = 0; c < draws.n_chains; ++c)
      for (int i = 0; i < draws.n_iter; ++i) pooled.push_back(draws.chains[c](i, it->second));
    const ParamDiag* pd = diag_of.count(e.name) ? diag_of[e.name] : nullptr;
    rows.push_back({e.name, sig3(vec_mean(pooled)), sig3(quantile_type7(pooled, 0.5)),
                    sig3(vec_sd(pooled)), sig3(vec_mad(pooled)),
                    sig3(quantile_type7(pooled, 0.05)), sig3(quantile_type7(pooled, 0.95)),
                    pd ? sig3(pd->rhat) : "NA", pd ? ess_text(pd->ess_bulk) : "NA",
                    pd ? ess_text(pd->ess_tail) : "NA"});
  }
  std::array<std::size_t, 10> widths{};
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size(); ++j) widths[j] = std::max(widths[j], r[j].size());
  for (const auto& r : rows) {
    out << rpad(r[0], widths[0]);
    for (std::size_t j = 1; j < r.size(); ++j) out << ' ' << lpad(r[j], widths[j]);
    out << "\n";
  }
  return out.str();
}

std::string diagnostics_text(const DiagnosticsReport& report, int n) {
  std::ostringstream out;
  out << "NUTS sampler diagnostics:\n\n";

  std::vector<std::string> issues;
  if (report.n_divergent > 0)
    issues.push_back(std::to_string(report.n_divergent) + " divergent transitions after warmup.");
  if (report.n_max_treedepth > 0)
    issues.push_back(std::to_string(report.n_max_treedepth) +
                     " transitions saturated the maximum tree depth.");
  if (!report.low_ebfmi_chains.empty()) {
    std::vector<std::string> labels;
    for (int c : report.low_ebfmi_chains) {
      std::ostringstream v;
      v << "chain:" << (c + 1) << " (" << std::setprecision(2)
        << report.ebfmi_per_chain[static_cast<std::size_t>(c)] << ")";
      labels.push_back(v.str());
    }
    issues.push_back("Low E-BFMI in " + join(labels, ", ") + ".");
  }
  if (issues.empty()) {
    out << "No divergences, saturated max treedepths or low E-BFMIs.\n";
  } else {
    for (const auto& line : issues) out << line << "\n";
  }

  auto section = [&](const std::string& title, auto key, bool ascending, auto format) {
    std::vector<const ParamDiag*> ranked;
    for (const auto& p : report.params)
      if (!std::isnan(key(p))) ranked.push_back(&p);
    std::sort(ranked.begin(), ranked.end(), [&](const ParamDiag* a, const ParamDiag* b) {
      return ascending ? key(*a) < key(*b) : key(*a) > key(*b);
    });
    if (ranked.size() > static_cast<std::size_t>(n)) ranked.resize(static_cast<std::size_t>(n));
    out << "\n" << title << "\n";
    std::size_t w = 0;
    for (const auto* p : ranked) w = std::max(w, p->name.size());
    for (const auto* p : ranked) out << rpad(p->name, w) << ' ' << format(key(*p)) << "\n";
  };

  section("Smallest bulk-ESS values:", [](const ParamDiag& p) { return p.ess_bulk; }, true,
          [](double v) { return ess_text(v); });
  section("Smallest tail-ESS values:", [](const ParamDiag& p) { return p.ess_tail; }, true,
          [](double v) { return ess_text(v); });
  section("Largest Rhat values:", [](const ParamDiag& p) { return p.rhat; }, false,
          [](double v) {
            std::ostringstream s;
            s << std::fixed << std::setprecision(2) << v;
            return s.str();
          });
  return out.str();
}

} // namespace dmp
