#include "dmpanel/logpost.hpp"

#include <cmath>
#include <limits>

#include "dmpanel/common.hpp"
#include "dmpanel/families.hpp"
#include "dmpanel/names.hpp"

namespace dmp {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<std::string> set_categories(const ChannelDesign& cd) {
  if (cd.family != Family::categorical) return {""};
  return std::vector<std::string>(cd.categories.begin() + 1,
                                  cd.categories.end());
}

double std_normal_logpdf(double z) { return -0.5 * (kLogTwoPi + z * z); }

} // namespace

void cpc_backward(const Eigen::VectorXd& y, int M, const Eigen::MatrixXd& dL,
                  Eigen::VectorXd& dy) {
  int pos = 0;
  for (int i = 1; i < M; ++i) {
    const int row0 = pos;
    std::vector<double> r(i), rem(i + 1);
    rem[0] = 1.0;
    for (int j = 0; j < i; ++j) {
      r[j] = std::tanh(y[row0 + j]);
      rem[j + 1] = rem[j] * (1.0 - r[j] * r[j]);
    }
    std::vector<double> dr(i, 0.0), drem(i + 1, 0.0);
    drem[i] = dL(i, i) / (2.0 * std::sqrt(rem[i]));
    for (int j = i - 1; j >= 0; --j) {
      dr[j] += drem[j + 1] * rem[j] * (-2.0 * r[j]);
      drem[j] += drem[j + 1] * (1.0 - r[j] * r[j]);
      dr[j] += dL(i, j) * std::sqrt(rem[j]);
      drem[j] += dL(i, j) * r[j] / (2.0 * std::sqrt(rem[j]));
    }
    for (int j = 0; j < i; ++j) dy[row0 + j] += dr[j] * (1.0 - r[j] * r[j]);
    pos += i;
  }
}

PosteriorModel::PosteriorModel(const ParamLayout& layout,
                               std::vector<PriorSpec> priors)
    : layout_(layout), priors_(std::move(priors)) {
  const DesignSet& ds = layout_.design();
  for (const auto& cd : ds.channels) {
    ChannelPriorRefs cb;
    for (const auto& cat : set_categories(cd)) {
      SetPriorRefs sb;
      for (int j = 0; j < cd.K_fixed(); ++j) {
        const std::string name =
            (j == 0 && cd.fixed_intercept)
                ? scalar_name("alpha", cd.response, cat)
                : coef_name("beta", cd.response, cd.fixed_names[j], cat);
        sb.beta.push_back(&prior_for(name));
      }
      if (cd.varying_intercept) {
        sb.a = &prior_for(scalar_name("alpha", cd.response, cat));
        sb.tau_alpha = &prior_for(scalar_name("tau_alpha", cd.response, cat));
      }
      for (int k = 0; k < cd.K_varying(); ++k) {
        sb.omega1.push_back(&prior_for(
            coef_name("delta", cd.response, cd.varying_names[k], cat)));
        sb.tau.push_back(&prior_for(
            coef_name("tau", cd.response, cd.varying_names[k], cat)));
      }
      cb.sets.push_back(std::move(sb));
    }
    if (family_has_aux(cd.family)) {
      const char* pfx = cd.family == Family::gaussian ? "sigma" : "phi";
      cb.aux = &prior_for(scalar_name(pfx, cd.response));
    }
    for (int j = 0; j < cd.K_random(); ++j) {
      sigma_nu_priors_.push_back(&prior_for(
          coef_name("sigma_nu", cd.response, cd.random_names[j])));
    }
    bindings_.push_back(std::move(cb));
  }
  if (layout_.cpc_offset() >= 0) {
    lkj_eta_ = prior_for("corr_nu").args[0];
  }
}

const PriorSpec& PosteriorModel::prior_for(const std::string& parameter) const {
  for (const auto& p : priors_) {
    if (p.parameter == parameter) return p;
  }
  throw spec_error("no prior specified for `" + parameter + "`");
}

double PosteriorModel::value(const Eigen::VectorXd& theta) const {
  return evaluate(theta, nullptr);
}

double PosteriorModel::value_and_grad(const Eigen::VectorXd& theta,
                                      Eigen::VectorXd& grad) const {
  const double lp = evaluate(theta, &grad);
  if (!std::isfinite(lp)) {
    grad.setZero(dim());
    return kNegInf;
  }
  return lp;
}

std::vector<std::string> PosteriorModel::value_names() const {
  return layout_.constrained_names();
}

void PosteriorModel::values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const {
  ParamBlock block = layout_.unpack(theta);
  layout_.constrained_values(block, out);
}

double PosteriorModel::evaluate(const Eigen::VectorXd& theta,
                                Eigen::VectorXd* grad) const {
  const DesignSet& ds = layout_.design();
  const Eigen::MatrixXd& B = ds.basis.B;
  const int D = layout_.spline_df();
  const int M = layout_.n_random();
  const int N = layout_.n_groups();
  const int T = ds.data.T();

  const ParamBlock p = layout_.unpack(theta);
  if (grad) grad->setZero(dim());
  double lp = 0.0;

  Eigen::MatrixXd dnu; // d lp / d actual nu
  if (M > 0) dnu = Eigen::MatrixXd::Zero(N, M);

  for (size_t c = 0; c < ds.channels.size(); ++c) {
    const auto& cd = ds.channels[c];
    const auto& co = layout_.channel_offsets()[c];
    const auto& cb = bindings_[c];
    const int n_sets = static_cast<int>(co.sets.size());
    const int Kf = cd.K_fixed(), Kv = cd.K_varying(), Kr = cd.K_random();

    // per-set precomputed time curves
    std::vector<Eigen::MatrixXd> Delta(n_sets); // T x Kv
    std::vector<Eigen::VectorXd> alpha_t(n_sets);
    for (int s = 0; s < n_sets; ++s) {
      const auto& set = p.channels[c].sets[s];
      if (Kv > 0) Delta[s] = B * set.omega.transpose();
      if (cd.varying_intercept) {
        alpha_t[s] = Eigen::VectorXd::Constant(T, set.a);
        for (int t = 0; t < T; ++t) {
          for (int d = 1; d < D; ++d) {
            alpha_t[s][t] += B(t, d) * set.omega_alpha[d - 1];
          }
        }
      }
    }

    // likelihood accumulators
    std::vector<Eigen::VectorXd> dbeta(n_sets,
                                       Eigen::VectorXd::Zero(std::max(Kf, 1)));
    std::vector<Eigen::MatrixXd> G(
        n_sets, Eigen::MatrixXd::Zero(T, std::max(Kv, 1)));
    std::vector<Eigen::VectorXd> A(n_sets, Eigen::VectorXd::Zero(T));
    double daux_sum = 0.0;

    std::vector<double> etas(n_sets), detas(n_sets);
    std::vector<double> eta_grad_scale(n_sets);
    for (size_t i = 0; i < cd.mask.size(); ++i) {
      if (!cd.mask[i]) continue;
      const int t = static_cast<int>(i) % T;
      const int g = static_cast<int>(i) / T;
      for (int s = 0; s < n_sets; ++s) {
        const auto& set = p.channels[c].sets[s];
        double eta = cd.offset.empty() ? 0.0 : cd.offset[i];
        for (int j = 0; j < Kf; ++j) {
          eta += cd.X_fixed(static_cast<int>(i), j) * set.beta[j];
        }
        if (cd.varying_intercept) eta += alpha_t[s][t];
        for (int k = 0; k < Kv; ++k) {
          eta += cd.X_varying(static_cast<int>(i), k) * Delta[s](t, k);
        }
        for (int j = 0; j < Kr; ++j) {
          eta += cd.X_random(static_cast<int>(i), j) *
                 p.nu(g, co.random_col0 + j);
        }
        etas[s] = eta;
      }
      if (cd.family == Family::categorical) {
        std::vector<double> dcat;
        lp += categorical_logpdf(static_cast<int>(cd.y[i]), etas,
                                 grad ? &dcat : nullptr);
        if (grad) {
          for (int s = 0; s < n_sets; ++s) eta_grad_scale[s] = dcat[s];
        }
      } else {
        const double extra = cd.trials.empty() ? 0.0 : cd.trials[i];
        const FamilyLogpdf r =
            family_logpdf(cd.family, cd.y[i], etas[0], p.channels[c].aux,
                          extra);
        lp += r.value;
        daux_sum += r.d_aux;
        eta_grad_scale[0] = r.d_eta;
      }
      if (!std::isfinite(lp)) return kNegInf;
      if (!grad) continue;
      for (int s = 0; s < n_sets; ++s) {
        const double de = eta_grad_scale[s];
        for (int j = 0; j < Kf; ++j) {
          dbeta[s][j] += cd.X_fixed(static_cast<int>(i), j) * de;
        }
        if (cd.varying_intercept) A[s][t] += de;
        for (int k = 0; k < Kv; ++k) {
          G[s](t, k) += cd.X_varying(static_cast<int>(i), k) * de;
        }
        for (int j = 0; j < Kr; ++j) {
          dnu(g, co.random_col0 + j) +=
              cd.X_random(static_cast<int>(i), j) * de;
        }
      }
    }

    // fold likelihood accumulators with priors and transforms
    for (int s = 0; s < n_sets; ++s) {
      const auto& set = p.channels[c].sets[s];
      const auto& so = co.sets[s];
      const auto& sb = cb.sets[s];

      for (int j = 0; j < Kf; ++j) {
        double pg = 0.0;
        lp += prior_logpdf(*sb.beta[j], set.beta[j], grad ? &pg : nullptr);
        if (grad) (*grad)[so.beta + j] += dbeta[s][j] + pg;
      }

      if (cd.varying_intercept) {
        const double tau = set.tau_alpha;
        double da = A[s].sum();
        Eigen::VectorXd dw = Eigen::VectorXd::Zero(D - 1);
        for (int d = 1; d < D; ++d) {
          for (int t = 0; t < T; ++t) dw[d - 1] += A[s][t] * B(t, d);
        }
        double pg = 0.0;
        lp += prior_logpdf(*sb.a, set.a, grad ? &pg : nullptr);
        da += pg;
        double dlogtau = 0.0;
        if (layout_.splines_noncentered()) {
          // coords: z_d with w_d = w_{d-1} + tau z_d from w_0 = 0
          double suffix = 0.0;
          for (int d = D - 2; d >= 0; --d) {
            suffix += dw[d];
            const double z = theta[so.omega_alpha + d];
            lp += std_normal_logpdf(z);
            if (grad) (*grad)[so.omega_alpha + d] += tau * suffix - z;
            dlogtau += tau * z * suffix;
          }
        } else {
          double prev = 0.0;
          for (int d = 0; d < D - 1; ++d) {
            const double diff = set.omega_alpha[d] - prev;
            lp += -std::log(tau) - 0.5 * kLogTwoPi -
                  0.5 * diff * diff / (tau * tau);
            dlogtau += -1.0 + diff * diff / (tau * tau);
            if (grad) {
              dw[d] += -diff / (tau * tau);
              if (d > 0) dw[d - 1] += diff / (tau * tau);
            }
            prev = set.omega_alpha[d];
          }
          if (grad) {
            for (int d = 0; d < D - 1; ++d) {
              (*grad)[so.omega_alpha + d] += dw[d];
            }
          }
        }
        double tpg = 0.0;
        lp += prior_logpdf(*sb.tau_alpha, tau, grad ? &tpg : nullptr) +
              std::log(tau);
        if (grad) {
          (*grad)[so.a] += da;
          (*grad)[so.tau_alpha] += dlogtau + tau * tpg + 1.0;
        }
      }

      for (int k = 0; k < Kv; ++k) {
        const double tau = set.tau[k];
        Eigen::VectorXd dom = Eigen::VectorXd::Zero(D);
        if (grad) {
          for (int d = 0; d < D; ++d) {
            for (int t = 0; t < T; ++t) dom[d] += G[s](t, k) * B(t, d);
          }
        }
        double pg = 0.0;
        lp += prior_logpdf(*sb.omega1[k], set.omega(k, 0),
                           grad ? &pg : nullptr);
        dom[0] += pg;
        double dlogtau = 0.0;
        if (layout_.splines_noncentered()) {
          double suffix = 0.0;
          for (int d = D - 1; d >= 1; --d) {
            suffix += dom[d];
            const double z = theta[so.omega + k * D + d];
            lp += std_normal_logpdf(z);
            if (grad) (*grad)[so.omega + k * D + d] += tau * suffix - z;
            dlogtau += tau * z * suffix;
          }
          if (grad) (*grad)[so.omega + k * D] += suffix + dom[0];
        } else {
          for (int d = 1; d < D; ++d) {
            const double diff = set.omega(k, d) - set.omega(k, d - 1);
            lp += -std::log(tau) - 0.5 * kLogTwoPi -
                  0.5 * diff * diff / (tau * tau);
            dlogtau += -1.0 + diff * diff / (tau * tau);
            dom[d] += -diff / (tau * tau);
            dom[d - 1] += diff / (tau * tau);
          }
          if (grad) {
            for (int d = 0; d < D; ++d) (*grad)[so.omega + k * D + d] += dom[d];
          }
        }
        double tpg = 0.0;
        lp += prior_logpdf(*sb.tau[k], tau, grad ? &tpg : nullptr) +
              std::log(tau);
        if (grad) (*grad)[so.tau + k] += dlogtau + tau * tpg + 1.0;
      }
    }

    if (co.aux >= 0) {
      const double aux = p.channels[c].aux;
      double pg = 0.0;
      lp += prior_logpdf(*cb.aux, aux, grad ? &pg : nullptr) + std::log(aux);
      if (grad) (*grad)[co.aux] += daux_sum * aux + aux * pg + 1.0;
    }
    if (!std::isfinite(lp)) return kNegInf;
  }

  if (M > 0) {
    const int nu0 = layout_.nu_offset();
    Eigen::MatrixXd dL; // wrt the Cholesky factor, lower triangle
    const bool corr = layout_.cpc_offset() >= 0;
    if (grad && corr) dL = Eigen::MatrixXd::Zero(M, M);
    Eigen::VectorXd dlogsigma = Eigen::VectorXd::Zero(M);

    if (layout_.nu_noncentered()) {
      // z ~ N(0,1); sigma and L reach the likelihood through nu
      for (int g = 0; g < N; ++g) {
        for (int m = 0; m < M; ++m) {
          lp += std_normal_logpdf(p.nu_raw(g, m));
        }
      }
      if (grad) {
        const Eigen::MatrixXd dZ =
            dnu * p.sigma_nu.asDiagonal() * p.L_nu;
        for (int g = 0; g < N; ++g) {
          for (int m = 0; m < M; ++m) {
            (*grad)[nu0 + g * M + m] += dZ(g, m) - p.nu_raw(g, m);
          }
        }
        for (int m = 0; m < M; ++m) {
          for (int g = 0; g < N; ++g) {
            dlogsigma[m] += dnu(g, m) * p.nu(g, m);
          }
        }
        if (corr) {
          const Eigen::MatrixXd t =
              p.sigma_nu.asDiagonal() * (dnu.transpose() * p.nu_raw);
          for (int m = 0; m < M; ++m) {
            for (int j = 0; j <= m; ++j) dL(m, j) = t(m, j);
          }
        }
      }
    } else {
      // centered: nu ~ MVN(0, diag(sigma) L L' diag(sigma))
      Eigen::MatrixXd Amat = p.sigma_nu.asDiagonal() * p.L_nu;
      Eigen::MatrixXd dA;
      if (grad) dA = Eigen::MatrixXd::Zero(M, M);
      double logdet = 0.0;
      for (int m = 0; m < M; ++m) logdet += std::log(Amat(m, m));
      lp += -N * logdet - 0.5 * N * M * kLogTwoPi;
      auto tri = Amat.triangularView<Eigen::Lower>();
      for (int g = 0; g < N; ++g) {
        Eigen::VectorXd w = tri.solve(p.nu.row(g).transpose());
        lp += -0.5 * w.squaredNorm();
        if (grad) {
          Eigen::VectorXd back =
              tri.transpose().solve(w); // A^{-T} w
          for (int m = 0; m < M; ++m) {
            (*grad)[nu0 + g * M + m] += dnu(g, m) - back[m];
          }
          dA += back * w.transpose();
        }
      }
      if (grad) {
        for (int m = 0; m < M; ++m) dA(m, m) -= N / Amat(m, m);
        for (int m = 0; m < M; ++m) {
          for (int j = 0; j <= m; ++j) {
            dlogsigma[m] += dA(m, j) * p.L_nu(m, j) * p.sigma_nu[m];
            if (corr) dL(m, j) += dA(m, j) * p.sigma_nu[m];
          }
        }
      }
    }

    for (int m = 0; m < M; ++m) {
      double pg = 0.0;
      lp += prior_logpdf(*sigma_nu_priors_[m], p.sigma_nu[m],
                         grad ? &pg : nullptr) +
            std::log(p.sigma_nu[m]);
      if (grad) {
        (*grad)[layout_.sigma_nu_offset() + m] +=
            dlogsigma[m] + p.sigma_nu[m] * pg + 1.0;
      }
    }

    if (corr) {
      const int cpc0 = layout_.cpc_offset();
      const int n_cpc = M * (M - 1) / 2;
      const Eigen::VectorXd y = theta.segment(cpc0, n_cpc);
      int pos = 0;
      for (int i = 1; i < M; ++i) {
        for (int j = 0; j < i; ++j) {
          const double b = lkj_eta_ + (M - j - 2) / 2.0;
          const double yy = y[pos];
          lp += -2.0 * b * std::log(std::cosh(yy));
          if (grad) (*grad)[cpc0 + pos] += -2.0 * b * std::tanh(yy);
          ++pos;
        }
      }
      if (grad) {
        Eigen::VectorXd dy = Eigen::VectorXd::Zero(n_cpc);
        cpc_backward(y, M, dL, dy);
        for (int i = 0; i < n_cpc; ++i) (*grad)[cpc0 + i] += dy[i];
      }
    }
  }

  if (!std::isfinite(lp)) return kNegInf;
  return lp;
}

} // namespace dmp
