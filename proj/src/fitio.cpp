#include "dmpanel/fitio.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "dmpanel/diagnostics.hpp"
#include "dmpanel/logpost.hpp"
#include "dmpanel/numfmt.hpp"
#include "dmpanel/posterior.hpp"

namespace dmp {

namespace {

std::string rstrip(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' ||
                        s.back() == ' ' || s.back() == '\t')) {
    s.pop_back();
  }
  return s;
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

double parse_double(const std::string& tok, const std::string& what) {
  char* end = nullptr;
  double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw io_error("draws file is corrupt: bad " + what + " `" + tok + "`");
  }
  return v;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

} // namespace

Fit prepare_fit(const std::string& formula_text, PanelData data,
                const std::vector<PriorSpec>& prior_overrides,
                const std::string& data_name) {
  Fit fit;
  fit.formula_text = rstrip(formula_text);
  fit.data_name = data_name;
  ModelFormula f = parse_formula(fit.formula_text);
  fit.design = std::make_unique<DesignSet>(build_design(f, data));
  fit.input = std::move(data);
  fit.layout = ParamLayout::build(*fit.design);
  fit.priors = default_priors(*fit.design);
  if (!prior_overrides.empty()) {
    fit.priors = apply_prior_overrides(std::move(fit.priors), prior_overrides);
  }
  // the design's panel copy carries the load-time notes, so take warnings
  // from there rather than from fit.input to avoid listing them twice
  fit.warnings = fit.design->data.warnings;
  fit.warnings.insert(fit.warnings.end(), fit.design->warnings.begin(),
                      fit.design->warnings.end());
  return fit;
}

void run_fit(Fit& fit) {
  PosteriorModel model(fit.layout, fit.priors);
  fit.draws = sample(model, fit.config, &fit.warnings);
}

std::string draws_to_csv(const Draws& d) {
  const auto& stats = Draws::stat_names();
  const int S = static_cast<int>(stats.size());
  const int P = static_cast<int>(d.names.size());
  std::ostringstream out;
  out << "chain,iteration";
  for (const auto& s : stats) out << "," << s;
  for (const auto& n : d.names) out << "," << n;
  out << "\n";
  for (int c = 0; c < d.n_chains; ++c) {
    for (int i = 0; i < d.n_iter; ++i) {
      out << (c + 1) << "," << (i + 1);
      for (int s = 0; s < S; ++s) out << "," << fmt_full(d.stats[c](i, s));
      for (int p = 0; p < P; ++p) out << "," << fmt_full(d.chains[c](i, p));
      out << "\n";
    }
  }
  return out.str();
}

Draws draws_from_csv(const std::string& text,
                     const std::vector<std::string>& expect_names) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw io_error("draws file is empty");
  const auto header = split_commas(rstrip(line));
  const auto& stats = Draws::stat_names();
  const size_t S = stats.size();
  if (header.size() < 2 + S || header[0] != "chain" || header[1] != "iteration") {
    throw io_error("draws file is corrupt: unexpected header");
  }
  for (size_t s = 0; s < S; ++s) {
    if (header[2 + s] != stats[s]) {
      throw io_error("draws file is corrupt: expected statistic column `" +
                     stats[s] + "`, found `" + header[2 + s] + "`");
    }
  }
  std::vector<std::string> names(header.begin() + 2 + S, header.end());
  if (!expect_names.empty() && names != expect_names) {
    throw io_error(
        "draws file does not match the model: parameter columns differ "
        "from the model's parameter set");
  }
  const size_t P = names.size();

  // collect rows grouped by chain; chains must be contiguous from 1 and
  // iterations must count 1..n within each
  std::vector<std::vector<std::vector<double>>> rows;
  while (std::getline(in, line)) {
    line = rstrip(line);
    if (line.empty()) continue;
    const auto toks = split_commas(line);
    if (toks.size() != header.size()) {
      throw io_error("draws file is corrupt: row has " +
                     std::to_string(toks.size()) + " fields, header has " +
                     std::to_string(header.size()));
    }
    const int chain = static_cast<int>(parse_double(toks[0], "chain index"));
    const int iter = static_cast<int>(parse_double(toks[1], "iteration"));
    if (chain < 1) throw io_error("draws file is corrupt: chain index < 1");
    if (chain > static_cast<int>(rows.size())) {
      if (chain != static_cast<int>(rows.size()) + 1) {
        throw io_error("draws file is corrupt: chains are not contiguous");
      }
      rows.emplace_back();
    }
    auto& chain_rows = rows[static_cast<size_t>(chain - 1)];
    if (iter != static_cast<int>(chain_rows.size()) + 1) {
      throw io_error("draws file is corrupt: iterations of chain " +
                     std::to_string(chain) + " are not consecutive");
    }
    std::vector<double> vals(S + P);
    for (size_t j = 0; j < S + P; ++j) {
      vals[j] = parse_double(toks[2 + j], "value in column `" + header[2 + j] + "`");
    }
    chain_rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw io_error("draws file contains no draws");
  const size_t n_iter = rows[0].size();
  for (const auto& chain_rows : rows) {
    if (chain_rows.size() != n_iter) {
      throw io_error("draws file is corrupt: chains have unequal lengths");
    }
  }

  Draws d;
  d.n_chains = static_cast<int>(rows.size());
  d.n_iter = static_cast<int>(n_iter);
  d.names = std::move(names);
  d.chains.resize(rows.size());
  d.stats.resize(rows.size());
  for (size_t c = 0; c < rows.size(); ++c) {
    d.chains[c].resize(static_cast<Eigen::Index>(n_iter),
                       static_cast<Eigen::Index>(P));
    d.stats[c].resize(static_cast<Eigen::Index>(n_iter),
                      static_cast<Eigen::Index>(S));
    for (size_t i = 0; i < n_iter; ++i) {
      for (size_t s = 0; s < S; ++s) d.stats[c](i, s) = rows[c][i][s];
      for (size_t p = 0; p < P; ++p) d.chains[c](i, p) = rows[c][i][S + p];
    }
  }
  return d;
}

Draws draws_from_values(const ParamLayout& layout,
                        const std::map<std::string, double>& values,
                        Warnings* warn) {
  Draws d;
  d.names = layout.constrained_names();
  d.n_chains = 1;
  d.n_iter = 1;

  std::map<std::string, size_t> pos;
  for (size_t j = 0; j < d.names.size(); ++j) pos[d.names[j]] = j;
  for (const auto& [name, v] : values) {
    (void)v;
    if (!pos.count(name)) {
      throw spec_error("unknown parameter `" + name +
                       "` in the supplied values; the priors command lists "
                       "every parameter of the model");
    }
  }

  const auto& reg = layout.registry();
  Eigen::MatrixXd m(1, static_cast<Eigen::Index>(d.names.size()));
  std::vector<std::string> defaulted;
  for (size_t j = 0; j < d.names.size(); ++j) {
    auto it = values.find(d.names[j]);
    if (it != values.end()) {
      m(0, static_cast<Eigen::Index>(j)) = it->second;
      continue;
    }
    const std::string& t = reg[j].type;
    const bool positive =
        t == "sigma" || t == "phi" || t == "tau" || t == "tau_alpha" ||
        t == "sigma_nu";
    m(0, static_cast<Eigen::Index>(j)) = positive ? 1.0 : 0.0;
    defaulted.push_back(d.names[j] + (positive ? " = 1" : " = 0"));
  }
  if (!defaulted.empty() && warn) {
    std::string msg = "No value given for " +
                      std::to_string(defaulted.size()) +
                      " parameters; using defaults: ";
    for (size_t i = 0; i < defaulted.size(); ++i) {
      if (i) msg += ", ";
      msg += defaulted[i];
    }
    warn->push_back(msg);
  }
  d.chains.push_back(m);
  d.stats.push_back(Eigen::MatrixXd::Zero(
      1, static_cast<Eigen::Index>(Draws::stat_names().size())));
  d.warmup_seconds.assign(1, 0.0);
  d.sample_seconds.assign(1, 0.0);
  d.elapsed_seconds.assign(1, 0.0);
  return d;
}

uint64_t model_hash(const std::string& formula_text,
                    const std::string& priors_csv,
                    const std::string& data_csv) {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    // field separator so ("ab","c") and ("a","bc") hash differently
    h ^= 0xffU;
    h *= 1099511628211ULL;
  };
  mix(formula_text);
  mix(priors_csv);
  mix(data_csv);
  return h;
}

void save_fit(const Fit& fit, const std::string& dir) {
  if (fit.draws.n_chains == 0) {
    throw spec_error("cannot save an unsampled fit; run the sampler first");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw io_error("cannot create output directory `" + dir + "`: " +
                   ec.message());
  }

  const std::string formula_file = fit.formula_text + "\n";
  const std::string priors_csv = priors_to_csv(fit.priors);
  std::ostringstream data_os;
  write_panel(fit.input, data_os);
  const std::string data_csv = data_os.str();

  write_text_file(dir + "/formula.dml", formula_file);
  write_text_file(dir + "/data.csv", data_csv);
  write_text_file(dir + "/priors.csv", priors_csv);
  write_text_file(dir + "/draws.csv", draws_to_csv(fit.draws));

  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["data_name"] = fit.data_name;
  meta["time_col"] = fit.input.time_col;
  meta["group_col"] = fit.input.group_col;
  meta["model_hash"] = hash_hex(model_hash(formula_file, priors_csv, data_csv));
  meta["config"] = {
      {"chains", fit.config.chains},
      {"iter_warmup", fit.config.iter_warmup},
      {"iter_sampling", fit.config.iter_sampling},
      {"seed", fit.config.seed},
      {"target_accept", fit.config.target_accept},
      {"max_treedepth", fit.config.max_treedepth},
      {"init_radius", fit.config.init_radius},
      {"cores", fit.config.cores},
  };
  meta["parameters"] = fit.draws.names;
  meta["warmup_seconds"] = fit.draws.warmup_seconds;
  meta["sample_seconds"] = fit.draws.sample_seconds;
  meta["warnings"] = fit.warnings;
  write_text_file(dir + "/meta.json", meta.dump(2) + "\n");

  DiagnosticsReport rep = diagnose(fit.draws, fit.config.max_treedepth);
  std::string summary = fit_summary(fit.design->formula, fit.data_name,
                                    fit.layout, fit.draws, rep);
  if (summary.empty() || summary.back() != '\n') summary += "\n";
  write_text_file(dir + "/summary.txt", summary);
}

Fit load_fit(const std::string& dir) {
  const std::string formula_file = read_text_file(dir + "/formula.dml");
  const std::string priors_csv = read_text_file(dir + "/priors.csv");
  const std::string data_csv = read_text_file(dir + "/data.csv");

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text_file(dir + "/meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw io_error("cannot parse `" + dir + "/meta.json`: " + e.what());
  }

  Fit fit;
  try {
    const std::string stored_hash = meta.at("model_hash").get<std::string>();
    if (stored_hash != hash_hex(model_hash(formula_file, priors_csv, data_csv))) {
      throw io_error("fit artifact `" + dir +
                     "` is inconsistent: formula, priors, or data were "
                     "modified after the fit was saved");
    }
    PanelData panel =
        panel_from_csv(data_csv, meta.at("time_col").get<std::string>(),
                       meta.at("group_col").get<std::string>());
    fit = prepare_fit(rstrip(formula_file), std::move(panel),
                      priors_from_csv(priors_csv),
                      meta.at("data_name").get<std::string>());
    const auto& cfg = meta.at("config");
    fit.config.chains = cfg.at("chains").get<int>();
    fit.config.iter_warmup = cfg.at("iter_warmup").get<int>();
    fit.config.iter_sampling = cfg.at("iter_sampling").get<int>();
    fit.config.seed = cfg.at("seed").get<uint64_t>();
    fit.config.target_accept = cfg.at("target_accept").get<double>();
    fit.config.max_treedepth = cfg.at("max_treedepth").get<int>();
    fit.config.init_radius = cfg.at("init_radius").get<double>();
    fit.config.cores = cfg.at("cores").get<int>();
    fit.warnings = meta.at("warnings").get<std::vector<std::string>>();
    fit.draws = draws_from_csv(read_text_file(dir + "/draws.csv"),
                               fit.layout.constrained_names());
    fit.draws.warmup_seconds =
        meta.at("warmup_seconds").get<std::vector<double>>();
    fit.draws.sample_seconds =
        meta.at("sample_seconds").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw io_error("`" + dir + "/meta.json` is missing required fields: " +
                   e.what());
  }
  fit.draws.elapsed_seconds.clear();
  for (size_t c = 0; c < fit.draws.warmup_seconds.size(); ++c) {
    double sampling = c < fit.draws.sample_seconds.size()
                          ? fit.draws.sample_seconds[c]
                          : 0.0;
    fit.draws.elapsed_seconds.push_back(fit.draws.warmup_seconds[c] + sampling);
  }
  return fit;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open `" + path + "`");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write `" + path + "`");
  out << text;
  out.flush();
  if (!out) throw io_error("failed while writing `" + path + "`");
}

} // namespace dmp
