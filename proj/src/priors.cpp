#include "dmpanel/priors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <set>
#include <sstream>

#include "dmpanel/common.hpp"
#include "dmpanel/names.hpp"
#include "dmpanel/numfmt.hpp"

namespace dmp {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

const char* dist_name(PriorDist d) {
  switch (d) {
    case PriorDist::normal: return "normal";
    case PriorDist::exponential: return "exponential";
    case PriorDist::student_t: return "student_t";
    case PriorDist::lkj: return "lkj";
  }
  return "";
}

// round to two significant digits, the granularity of the default table
double signif2(double x) {
  if (x == 0.0 || !std::isfinite(x)) return x;
  const double mag =
      std::pow(10.0, std::floor(std::log10(std::abs(x))) - 1.0);
  return std::round(x / mag) * mag;
}

double median_of(std::vector<double> v) {
  const size_t n = v.size();
  std::sort(v.begin(), v.end());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= v.size();
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / (v.size() - 1));
}

// 1.4826 * MAD of v; falls back to the sd when the MAD vanishes, and is
// floored at 1 so priors stay proper for constant responses
double robust_scale(const std::vector<double>& v) {
  if (v.empty()) return 1.0;
  const double med = median_of(v);
  std::vector<double> dev;
  dev.reserve(v.size());
  for (double x : v) dev.push_back(std::abs(x - med));
  const double mad = 1.4826 * median_of(dev);
  if (mad > 0.0) return std::max(1.0, mad);
  return std::max(1.0, sd_of(v));
}

double clamp01(double p) { return std::min(0.99, std::max(0.01, p)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

// response values on the link-ish scale the channel's priors should match
std::vector<double> link_scale_values(const ChannelDesign& cd) {
  std::vector<double> out;
  for (size_t i = 0; i < cd.mask.size(); ++i) {
    if (!cd.mask[i]) continue;
    const double y = cd.y[i];
    switch (cd.family) {
      case Family::gaussian: out.push_back(y); break;
      case Family::poisson:
      case Family::negbin: out.push_back(std::log1p(y)); break;
      case Family::exponential:
      case Family::gamma_dist: out.push_back(std::log(y)); break;
      case Family::beta: out.push_back(logit(y)); break;
      default: return {}; // logit-type discrete families use scale 1
    }
  }
  return out;
}

// mean response at the first modeled timepoint, pushed through the link
double alpha_location(const DesignSet& ds, const ChannelDesign& cd) {
  const size_t T = ds.data.T();
  const size_t t0 =
      std::min<size_t>(static_cast<size_t>(ds.fixed_points), T - 1);
  std::vector<double> ys, ns;
  for (size_t g = 0; g < static_cast<size_t>(ds.data.N()); ++g) {
    const size_t i = g * T + t0;
    if (!cd.mask[i]) continue;
    ys.push_back(cd.y[i]);
    if (!cd.trials.empty()) ns.push_back(cd.trials[i]);
  }
  if (ys.empty()) {
    for (size_t i = 0; i < cd.mask.size(); ++i) {
      if (!cd.mask[i]) continue;
      ys.push_back(cd.y[i]);
      if (!cd.trials.empty()) ns.push_back(cd.trials[i]);
    }
  }
  if (ys.empty()) return 0.0;
  double m = 0.0;
  if (cd.family == Family::binomial) {
    double acc = 0.0;
    size_t cnt = 0;
    for (size_t i = 0; i < ys.size(); ++i) {
      if (ns[i] > 0) {
        acc += ys[i] / ns[i];
        ++cnt;
      }
    }
    m = cnt ? acc / cnt : 0.5;
  } else {
    for (double y : ys) m += y;
    m /= ys.size();
  }
  switch (cd.family) {
    case Family::gaussian: return m;
    case Family::poisson:
    case Family::negbin: return std::log1p(m);
    case Family::exponential:
    case Family::gamma_dist: return std::log(std::max(m, 1e-8));
    case Family::bernoulli:
    case Family::binomial:
    case Family::beta: return logit(clamp01(m));
    default: return 0.0;
  }
}

// per-category intercept locations for a categorical channel: log odds of
// each category against the reference, with add-one smoothing
std::vector<double> categorical_alpha_locations(const DesignSet& ds,
                                                const ChannelDesign& cd) {
  const size_t L = cd.categories.size();
  const size_t T = ds.data.T();
  const size_t t0 =
      std::min<size_t>(static_cast<size_t>(ds.fixed_points), T - 1);
  std::vector<double> counts(L, 1.0);
  size_t used = 0;
  for (size_t g = 0; g < static_cast<size_t>(ds.data.N()); ++g) {
    const size_t i = g * T + t0;
    if (!cd.mask[i]) continue;
    ++counts[static_cast<size_t>(cd.y[i])];
    ++used;
  }
  if (used == 0) {
    for (size_t i = 0; i < cd.mask.size(); ++i) {
      if (cd.mask[i]) ++counts[static_cast<size_t>(cd.y[i])];
    }
  }
  std::vector<double> out;
  for (size_t l = 1; l < L; ++l) out.push_back(std::log(counts[l] / counts[0]));
  return out;
}

double column_sd(const Eigen::MatrixXd& X, int j,
                 const std::vector<uint8_t>& mask) {
  std::vector<double> v;
  for (int i = 0; i < X.rows(); ++i) {
    if (mask[static_cast<size_t>(i)]) v.push_back(X(i, j));
  }
  const double s = sd_of(v);
  return s > 0.0 ? s : 1.0;
}

PriorSpec make_normal(std::string parameter, std::string response,
                      std::string type, double mu, double sd,
                      std::string category = "") {
  PriorSpec p;
  p.parameter = std::move(parameter);
  p.response = std::move(response);
  p.dist = PriorDist::normal;
  p.args = {signif2(mu), signif2(sd)};
  p.type = std::move(type);
  p.category = std::move(category);
  return p;
}

PriorSpec make_exponential(std::string parameter, std::string response,
                           std::string type, double rate) {
  PriorSpec p;
  p.parameter = std::move(parameter);
  p.response = std::move(response);
  p.dist = PriorDist::exponential;
  p.args = {signif2(rate)};
  p.type = std::move(type);
  return p;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// one CSV record with quoted-field support; the priors table never spans lines
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s, bool force_quote = false) {
  const bool needs =
      force_quote || s.find_first_of(",\"\n ") != std::string::npos;
  if (!needs) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

bool is_positive_type(const std::string& type) {
  return type == "tau" || type == "tau_alpha" || type == "sigma" ||
         type == "sigma_nu" || type == "phi";
}

} // namespace

void parse_prior_literal(const std::string& text, PriorSpec& out) {
  const std::string t = trim(text);
  auto fail = [&](const std::string& why) {
    throw spec_error("malformed prior literal `" + t + "`: " + why);
  };
  const size_t open = t.find('(');
  if (open == std::string::npos || t.back() != ')')
    fail("expected name(arg, ...)");
  const std::string name = trim(t.substr(0, open));
  const std::string inner = t.substr(open + 1, t.size() - open - 2);
  std::vector<double> args;
  std::stringstream ss(inner);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    piece = trim(piece);
    if (piece.empty()) fail("empty argument");
    char* end = nullptr;
    const double v = std::strtod(piece.c_str(), &end);
    if (end != piece.c_str() + piece.size() || !std::isfinite(v))
      fail("argument `" + piece + "` is not a number");
    args.push_back(v);
  }
  if (name == "normal") {
    if (args.size() != 2) fail("normal takes (mean, sd)");
    if (args[1] <= 0) fail("sd must be positive");
    out.dist = PriorDist::normal;
  } else if (name == "exponential") {
    if (args.size() != 1) fail("exponential takes (rate)");
    if (args[0] <= 0) fail("rate must be positive");
    out.dist = PriorDist::exponential;
  } else if (name == "student_t") {
    if (args.size() != 3) fail("student_t takes (df, mean, sd)");
    if (args[0] <= 0) fail("df must be positive");
    if (args[2] <= 0) fail("sd must be positive");
    out.dist = PriorDist::student_t;
  } else if (name == "lkj") {
    if (args.size() != 1) fail("lkj takes (shape)");
    if (args[0] <= 0) fail("shape must be positive");
    out.dist = PriorDist::lkj;
  } else {
    fail("unknown distribution `" + name + "`");
  }
  out.args = std::move(args);
}

std::string print_prior_literal(const PriorSpec& p) {
  std::string out = dist_name(p.dist);
  out += "(";
  for (size_t i = 0; i < p.args.size(); ++i) {
    if (i) out += ", ";
    out += fmt_num(p.args[i]);
  }
  out += ")";
  return out;
}

double prior_logpdf(const PriorSpec& p, double x, double* dx) {
  switch (p.dist) {
    case PriorDist::normal: {
      const double mu = p.args[0], sd = p.args[1];
      const double z = (x - mu) / sd;
      if (dx) *dx = -z / sd;
      return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
    }
    case PriorDist::exponential: {
      const double rate = p.args[0];
      if (dx) *dx = -rate;
      return std::log(rate) - rate * x;
    }
    case PriorDist::student_t: {
      const double nu = p.args[0], mu = p.args[1], sd = p.args[2];
      const double z = (x - mu) / sd;
      if (dx) *dx = -(nu + 1.0) * z / (nu + z * z) / sd;
      return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
             0.5 * std::log(nu * M_PI) - std::log(sd) -
             0.5 * (nu + 1.0) * std::log1p(z * z / nu);
    }
    case PriorDist::lkj:
      throw spec_error("lkj prior has no scalar density");
  }
  return 0.0;
}

std::vector<PriorSpec> default_priors(const DesignSet& ds) {
  std::vector<PriorSpec> rows;
  for (const auto& cd : ds.channels) {
    const double s = cd.family == Family::categorical
                         ? 1.0
                         : robust_scale(link_scale_values(cd));
    // one parameter set per non-reference category; one unnamed set otherwise
    std::vector<std::string> cats = {""};
    std::vector<double> alpha_locs = {0.0};
    if (cd.family == Family::categorical) {
      cats.assign(cd.categories.begin() + 1, cd.categories.end());
      alpha_locs = categorical_alpha_locations(ds, cd);
    } else {
      alpha_locs[0] = alpha_location(ds, cd);
    }

    for (int j = 0; j < cd.K_random(); ++j) {
      rows.push_back(make_normal(
          coef_name("sigma_nu", cd.response, cd.random_names[j]), cd.response,
          "sigma_nu", 0.0, 2.0 * s));
    }
    if (cd.fixed_intercept || cd.varying_intercept) {
      for (size_t l = 0; l < cats.size(); ++l) {
        rows.push_back(make_normal(scalar_name("alpha", cd.response, cats[l]),
                                   cd.response, "alpha", alpha_locs[l], 2.0 * s,
                                   cats[l]));
      }
    }
    if (cd.varying_intercept) {
      for (const auto& cat : cats) {
        rows.push_back(make_normal(scalar_name("tau_alpha", cd.response, cat),
                                   cd.response, "tau_alpha", 0.0, 2.0 * s,
                                   cat));
      }
    }
    for (int j = 0; j < cd.K_fixed(); ++j) {
      if (j == 0 && cd.fixed_intercept) continue; // the alpha row covers it
      const double sx = column_sd(cd.X_fixed, j, cd.mask);
      for (const auto& cat : cats) {
        rows.push_back(
            make_normal(coef_name("beta", cd.response, cd.fixed_names[j], cat),
                        cd.response, "beta", 0.0, 2.0 * s / sx, cat));
      }
    }
    for (int j = 0; j < cd.K_varying(); ++j) {
      const double sx = column_sd(cd.X_varying, j, cd.mask);
      for (const auto& cat : cats) {
        rows.push_back(make_normal(
            coef_name("delta", cd.response, cd.varying_names[j], cat),
            cd.response, "delta", 0.0, 2.0 * s / sx, cat));
      }
    }
    for (int j = 0; j < cd.K_varying(); ++j) {
      for (const auto& cat : cats) {
        rows.push_back(
            make_normal(coef_name("tau", cd.response, cd.varying_names[j], cat),
                        cd.response, "tau", 0.0, 2.0 * s, cat));
      }
    }
    if (cd.family == Family::gaussian) {
      rows.push_back(make_exponential(scalar_name("sigma", cd.response),
                                      cd.response, "sigma", 1.0 / s));
    }
    if (cd.family == Family::negbin || cd.family == Family::gamma_dist ||
        cd.family == Family::beta) {
      rows.push_back(make_exponential(scalar_name("phi", cd.response),
                                      cd.response, "phi", 1.0));
    }
  }
  if (ds.total_random() >= 2 &&
      ds.formula.random_spec_or_default().correlated) {
    PriorSpec p;
    p.parameter = "corr_nu";
    p.dist = PriorDist::lkj;
    p.args = {1.0};
    p.type = "corr_nu";
    rows.push_back(p);
  }
  return rows;
}

std::string priors_to_csv(const std::vector<PriorSpec>& priors) {
  std::string out = "parameter,response,prior,type,category\n";
  for (const auto& p : priors) {
    out += csv_field(p.parameter);
    out += ',';
    out += csv_field(p.response);
    out += ',';
    out += csv_field(print_prior_literal(p), true);
    out += ',';
    out += csv_field(p.type);
    out += ',';
    out += csv_field(p.category);
    out += '\n';
  }
  return out;
}

std::vector<PriorSpec> priors_from_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line))
    throw io_error("priors file is empty");
  auto header = split_csv_line(line);
  const std::vector<std::string> want = {"parameter", "response", "prior",
                                         "type", "category"};
  if (std::vector<std::string>(header.begin(), header.end()) != want)
    throw io_error(
        "priors file must have columns parameter,response,prior,type,category");
  std::vector<PriorSpec> rows;
  while (std::getline(ss, line)) {
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 5)
      throw io_error("priors row has " + std::to_string(fields.size()) +
                     " fields, expected 5");
    PriorSpec p;
    p.parameter = trim(fields[0]);
    p.response = trim(fields[1]);
    parse_prior_literal(fields[2], p);
    p.type = trim(fields[3]);
    p.category = trim(fields[4]);
    rows.push_back(std::move(p));
  }
  return rows;
}

std::vector<PriorSpec> apply_prior_overrides(
    std::vector<PriorSpec> defaults, const std::vector<PriorSpec>& user) {
  std::set<std::string> seen;
  for (const auto& u : user) {
    if (!seen.insert(u.parameter).second)
      throw spec_error("duplicate prior row for `" + u.parameter + "`");
    auto it = std::find_if(
        defaults.begin(), defaults.end(),
        [&](const PriorSpec& d) { return d.parameter == u.parameter; });
    if (it == defaults.end())
      throw spec_error("unknown parameter `" + u.parameter +
                       "` in priors; the priors command lists valid rows");
    if (!u.response.empty() && u.response != it->response)
      throw spec_error("prior row for `" + u.parameter +
                       "` names response `" + u.response + "`, expected `" +
                       it->response + "`");
    if (!u.type.empty() && u.type != it->type)
      throw spec_error("prior row for `" + u.parameter + "` has type `" +
                       u.type + "`, expected `" + it->type + "`");
    if (it->type == "corr_nu" && u.dist != PriorDist::lkj)
      throw spec_error("prior for `corr_nu` must be an lkj literal");
    if (it->type != "corr_nu" && u.dist == PriorDist::lkj)
      throw spec_error("lkj prior is only valid for `corr_nu`");
    if (u.dist == PriorDist::exponential && !is_positive_type(it->type))
      throw spec_error("exponential prior is not valid for unbounded "
                       "parameter `" + u.parameter + "`");
    it->dist = u.dist;
    it->args = u.args;
  }
  return defaults;
}

} // namespace dmp
