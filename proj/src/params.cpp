#include "dmpanel/params.hpp"

#include <cctype>
#include <cmath>
#include <set>

#include "dmpanel/common.hpp"
#include "dmpanel/families.hpp"
#include "dmpanel/names.hpp"

namespace dmp {

namespace {

// coefficient sets: one per non-reference category, otherwise a single
// unnamed set
std::vector<std::string> set_categories(const ChannelDesign& cd) {
  if (cd.family != Family::categorical) return {""};
  return std::vector<std::string>(cd.categories.begin() + 1,
                                  cd.categories.end());
}

} // namespace

Eigen::MatrixXd cholesky_corr_from_cpc(const Eigen::VectorXd& y, int M) {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(M, M);
  L(0, 0) = 1.0;
  int pos = 0;
  for (int i = 1; i < M; ++i) {
    double remaining = 1.0;
    for (int j = 0; j < i; ++j) {
      const double r = std::tanh(y[pos++]);
      L(i, j) = r * std::sqrt(remaining);
      remaining -= L(i, j) * L(i, j);
    }
    L(i, i) = std::sqrt(remaining);
  }
  return L;
}

ParamLayout ParamLayout::build(const DesignSet& ds) {
  ParamLayout lay;
  lay.ds_ = &ds;
  lay.splines_noncentered_ =
      ds.formula.splines ? ds.formula.splines->noncentered : false;
  const RandomSpecConfig rcfg = ds.formula.random_spec_or_default();
  lay.nu_noncentered_ = rcfg.noncentered;
  lay.nu_correlated_ = rcfg.correlated;
  lay.D_ = ds.basis.df;
  lay.M_ = ds.total_random();
  lay.N_ = ds.data.N();

  int pos = 0;
  int mcol = 0;
  for (const auto& cd : ds.channels) {
    ChannelOffsets co;
    const int n_sets = static_cast<int>(set_categories(cd).size());
    for (int s = 0; s < n_sets; ++s) {
      SetOffsets so;
      so.beta = pos;
      pos += cd.K_fixed();
      if (cd.varying_intercept) {
        so.a = pos++;
        so.omega_alpha = pos;
        pos += lay.D_ - 1;
        so.tau_alpha = pos++;
      }
      if (cd.K_varying() > 0) {
        so.omega = pos;
        pos += cd.K_varying() * lay.D_;
        so.tau = pos;
        pos += cd.K_varying();
      }
      co.sets.push_back(so);
    }
    if (family_has_aux(cd.family)) co.aux = pos++;
    co.random_col0 = cd.K_random() > 0 ? mcol : -1;
    mcol += cd.K_random();
    lay.offsets_.push_back(std::move(co));
  }
  if (lay.M_ > 0) {
    lay.sigma_nu_ = pos;
    pos += lay.M_;
    lay.nu_ = pos;
    pos += lay.N_ * lay.M_;
    if (lay.nu_correlated_ && lay.M_ >= 2) {
      lay.cpc_ = pos;
      pos += lay.M_ * (lay.M_ - 1) / 2;
    }
  }
  lay.total_ = pos;
  lay.build_registry();
  return lay;
}

int ParamLayout::n_sets(int channel) const {
  return static_cast<int>(offsets_[channel].sets.size());
}

ParamBlock ParamLayout::unpack(const Eigen::VectorXd& theta) const {
  const DesignSet& ds = *ds_;
  ParamBlock p;
  for (size_t c = 0; c < ds.channels.size(); ++c) {
    const auto& cd = ds.channels[c];
    const auto& co = offsets_[c];
    ChannelParams cp;
    for (const auto& so : co.sets) {
      ChannelParamSet set;
      set.beta = theta.segment(so.beta, cd.K_fixed());
      if (cd.varying_intercept) {
        set.a = theta[so.a];
        set.tau_alpha = std::exp(theta[so.tau_alpha]);
        set.omega_alpha.resize(D_ - 1);
        double prev = 0.0;
        for (int d = 0; d < D_ - 1; ++d) {
          const double raw = theta[so.omega_alpha + d];
          set.omega_alpha[d] =
              splines_noncentered_ ? prev + set.tau_alpha * raw : raw;
          prev = set.omega_alpha[d];
        }
      }
      if (cd.K_varying() > 0) {
        set.tau.resize(cd.K_varying());
        set.omega.resize(cd.K_varying(), D_);
        for (int k = 0; k < cd.K_varying(); ++k) {
          set.tau[k] = std::exp(theta[so.tau + k]);
          set.omega(k, 0) = theta[so.omega + k * D_];
          for (int d = 1; d < D_; ++d) {
            const double raw = theta[so.omega + k * D_ + d];
            set.omega(k, d) = splines_noncentered_
                                  ? set.omega(k, d - 1) + set.tau[k] * raw
                                  : raw;
          }
        }
      }
      cp.sets.push_back(std::move(set));
    }
    if (co.aux >= 0) cp.aux = std::exp(theta[co.aux]);
    p.channels.push_back(std::move(cp));
  }
  if (M_ > 0) {
    p.sigma_nu = theta.segment(sigma_nu_, M_).array().exp();
    p.nu_raw.resize(N_, M_);
    for (int g = 0; g < N_; ++g) {
      for (int m = 0; m < M_; ++m) p.nu_raw(g, m) = theta[nu_ + g * M_ + m];
    }
    if (cpc_ >= 0) {
      p.L_nu = cholesky_corr_from_cpc(
          theta.segment(cpc_, M_ * (M_ - 1) / 2), M_);
    } else {
      p.L_nu = Eigen::MatrixXd::Identity(M_, M_);
    }
    if (nu_noncentered_) {
      // nu_i = diag(sigma_nu) L z_i
      p.nu = p.nu_raw * p.L_nu.transpose() * p.sigma_nu.asDiagonal();
    } else {
      p.nu = p.nu_raw;
    }
  } else {
    p.L_nu.resize(0, 0);
  }
  return p;
}

std::string ParamLayout::group_label(const PanelData& data, int g) {
  const std::string& id = data.group_ids[static_cast<size_t>(g)];
  if (data.group_is_numeric) return data.group_col + id;
  return id;
}

void ParamLayout::build_registry() {
  const DesignSet& ds = *ds_;
  const int T = ds.data.T();
  registry_.clear();

  std::vector<std::vector<RegistryEntry>> by_type(11);
  enum { kAlpha, kBeta, kDelta, kNu, kTau, kTauAlpha, kSigma, kSigmaNu,
         kPhi, kCorrNu, kOmega };

  for (size_t c = 0; c < ds.channels.size(); ++c) {
    const auto& cd = ds.channels[c];
    const auto cats = set_categories(cd);
    for (size_t s = 0; s < cats.size(); ++s) {
      const std::string& cat = cats[s];
      const int ci = static_cast<int>(c), si = static_cast<int>(s);

      if (cd.varying_intercept) {
        for (int t = 1; t <= T; ++t) {
          RegistryEntry e;
          e.name = scalar_name("alpha", cd.response, cat) + "[" +
                   std::to_string(t) + "]";
          e.type = "alpha";
          e.response = cd.response;
          e.time = t;
          e.category = cat;
          // capture the basis row by value so the closure survives moves
          std::vector<double> brow(static_cast<size_t>(D_));
          for (int d = 0; d < D_; ++d) brow[static_cast<size_t>(d)] = ds.basis.B(t - 1, d);
          e.value = [brow, ci, si](const ParamBlock& p) {
            const auto& set = p.channels[ci].sets[si];
            double v = set.a;
            for (size_t d = 1; d < brow.size(); ++d) {
              v += brow[d] * set.omega_alpha[d - 1];
            }
            return v;
          };
          by_type[kAlpha].push_back(std::move(e));
        }
        {
          RegistryEntry e;
          e.name = scalar_name("tau_alpha", cd.response, cat);
          e.type = "tau_alpha";
          e.response = cd.response;
          e.category = cat;
          e.value = [ci, si](const ParamBlock& p) {
            return p.channels[ci].sets[si].tau_alpha;
          };
          by_type[kTauAlpha].push_back(std::move(e));
        }
        for (int d = 1; d <= D_; ++d) {
          // the full intercept spline vector: omega_alpha[1] is a itself
          RegistryEntry e;
          e.name = scalar_name("omega_alpha", cd.response, cat) + "[" +
                   std::to_string(d) + "]";
          e.type = "omega";
          e.response = cd.response;
          e.category = cat;
          e.value = [ci, si, d](const ParamBlock& p) {
            const auto& set = p.channels[ci].sets[si];
            return d == 1 ? set.a : set.a + set.omega_alpha[d - 2];
          };
          by_type[kOmega].push_back(std::move(e));
        }
      } else if (cd.fixed_intercept) {
        RegistryEntry e;
        e.name = scalar_name("alpha", cd.response, cat);
        e.type = "alpha";
        e.response = cd.response;
        e.category = cat;
        e.value = [ci, si](const ParamBlock& p) {
          return p.channels[ci].sets[si].beta[0];
        };
        by_type[kAlpha].push_back(std::move(e));
      }

      for (int j = cd.fixed_intercept ? 1 : 0; j < cd.K_fixed(); ++j) {
        RegistryEntry e;
        e.name = coef_name("beta", cd.response, cd.fixed_names[j], cat);
        e.type = "beta";
        e.response = cd.response;
        e.predictor = cd.fixed_names[j];
        e.category = cat;
        e.value = [ci, si, j](const ParamBlock& p) {
          return p.channels[ci].sets[si].beta[j];
        };
        by_type[kBeta].push_back(std::move(e));
      }

      for (int k = 0; k < cd.K_varying(); ++k) {
        for (int t = 1; t <= T; ++t) {
          RegistryEntry e;
          e.name = coef_name("delta", cd.response, cd.varying_names[k], cat) +
                   "[" + std::to_string(t) + "]";
          e.type = "delta";
          e.response = cd.response;
          e.predictor = cd.varying_names[k];
          e.time = t;
          e.category = cat;
          std::vector<double> brow(static_cast<size_t>(D_));
          for (int d = 0; d < D_; ++d) brow[static_cast<size_t>(d)] = ds.basis.B(t - 1, d);
          e.value = [brow, ci, si, k](const ParamBlock& p) {
            const auto& set = p.channels[ci].sets[si];
            double v = 0.0;
            for (size_t d = 0; d < brow.size(); ++d) {
              v += brow[d] * set.omega(k, d);
            }
            return v;
          };
          by_type[kDelta].push_back(std::move(e));
        }
        {
          RegistryEntry e;
          e.name = coef_name("tau", cd.response, cd.varying_names[k], cat);
          e.type = "tau";
          e.response = cd.response;
          e.predictor = cd.varying_names[k];
          e.category = cat;
          e.value = [ci, si, k](const ParamBlock& p) {
            return p.channels[ci].sets[si].tau[k];
          };
          by_type[kTau].push_back(std::move(e));
        }
        for (int d = 1; d <= D_; ++d) {
          RegistryEntry e;
          e.name = coef_name("omega", cd.response, cd.varying_names[k], cat) +
                   "[" + std::to_string(d) + "]";
          e.type = "omega";
          e.response = cd.response;
          e.predictor = cd.varying_names[k];
          e.category = cat;
          e.value = [ci, si, k, d](const ParamBlock& p) {
            return p.channels[ci].sets[si].omega(k, d - 1);
          };
          by_type[kOmega].push_back(std::move(e));
        }
      }
    }

    for (int j = 0; j < cd.K_random(); ++j) {
      const int mcol = offsets_[c].random_col0 + j;
      for (int g = 0; g < N_; ++g) {
        RegistryEntry e;
        e.name = coef_name("nu", cd.response, cd.random_names[j]) + "_" +
                 group_label(ds.data, g);
        e.type = "nu";
        e.response = cd.response;
        e.predictor = cd.random_names[j];
        e.group = ds.data.group_ids[static_cast<size_t>(g)];
        e.value = [mcol, g](const ParamBlock& p) { return p.nu(g, mcol); };
        by_type[kNu].push_back(std::move(e));
      }
      RegistryEntry e;
      e.name = coef_name("sigma_nu", cd.response, cd.random_names[j]);
      e.type = "sigma_nu";
      e.response = cd.response;
      e.predictor = cd.random_names[j];
      e.value = [mcol](const ParamBlock& p) { return p.sigma_nu[mcol]; };
      by_type[kSigmaNu].push_back(std::move(e));
    }

    if (cd.family == Family::gaussian) {
      RegistryEntry e;
      e.name = scalar_name("sigma", cd.response);
      e.type = "sigma";
      e.response = cd.response;
      const int ci = static_cast<int>(c);
      e.value = [ci](const ParamBlock& p) { return p.channels[ci].aux; };
      by_type[kSigma].push_back(std::move(e));
    } else if (family_has_aux(cd.family)) {
      RegistryEntry e;
      e.name = scalar_name("phi", cd.response);
      e.type = "phi";
      e.response = cd.response;
      const int ci = static_cast<int>(c);
      e.value = [ci](const ParamBlock& p) { return p.channels[ci].aux; };
      by_type[kPhi].push_back(std::move(e));
    }
  }

  if (cpc_ >= 0) {
    // flatten (channel, random column) identities in nu-column order
    std::vector<std::string> col_ids;
    for (const auto& cd : ds.channels) {
      for (const auto& rn : cd.random_names) {
        col_ids.push_back(cd.response + "_" + rn);
      }
    }
    for (int a = 0; a < M_; ++a) {
      for (int b = a + 1; b < M_; ++b) {
        RegistryEntry e;
        e.name = "corr_nu_" + col_ids[a] + "_" + col_ids[b];
        e.type = "corr_nu";
        e.value = [a, b](const ParamBlock& p) {
          return (p.L_nu * p.L_nu.transpose())(b, a);
        };
        by_type[kCorrNu].push_back(std::move(e));
      }
    }
  }

  for (auto& bucket : by_type) {
    for (auto& e : bucket) registry_.push_back(std::move(e));
  }
  std::set<std::string> seen;
  for (const auto& e : registry_) {
    if (!seen.insert(e.name).second) {
      throw spec_error("parameter name `" + e.name +
                       "` is ambiguous; rename the clashing columns");
    }
  }
}

std::vector<std::string> ParamLayout::constrained_names() const {
  std::vector<std::string> out;
  out.reserve(registry_.size());
  for (const auto& e : registry_) out.push_back(e.name);
  return out;
}

void ParamLayout::constrained_values(const ParamBlock& p,
                                     Eigen::VectorXd& out) const {
  out.resize(static_cast<int>(registry_.size()));
  for (size_t i = 0; i < registry_.size(); ++i) {
    out[static_cast<int>(i)] = registry_[i].value(p);
  }
}

} // namespace dmp
