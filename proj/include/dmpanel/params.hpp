#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpanel/design.hpp"

namespace dmp {

/// Constrained-scale parameters for one coefficient set. Non-categorical
/// channels have one set; categorical channels one per non-reference
/// category.
struct ChannelParamSet {
  Eigen::VectorXd beta;        // K_fixed; beta[0] is the constant intercept
                               // when the channel has one
  double a = 0.0;              // first-timepoint level (time-varying icpt)
  Eigen::VectorXd omega_alpha; // D-1 spline increments away from a
  double tau_alpha = 0.0;
  Eigen::MatrixXd omega;       // K_varying x D spline coefficients
  Eigen::VectorXd tau;         // K_varying random-walk scales
};

struct ChannelParams {
  std::vector<ChannelParamSet> sets;
  double aux = 0.0; // gaussian sd; negbin / gamma / beta phi
};

/// Everything the model needs on the constrained scale.
struct ParamBlock {
  std::vector<ChannelParams> channels;
  Eigen::VectorXd sigma_nu; // M
  Eigen::MatrixXd nu_raw;   // N x M, as sampled
  Eigen::MatrixXd nu;       // N x M, actual effects entering eta
  Eigen::MatrixXd L_nu;     // M x M lower Cholesky of the correlation
};

/// One column of the draws table.
struct RegistryEntry {
  std::string name;
  std::string type;      // alpha|beta|delta|nu|tau|tau_alpha|sigma|sigma_nu|
                         // phi|corr_nu|omega
  std::string response;  // empty for corr_nu
  std::string predictor; // design column / random column label
  int time = -1;         // 1-based timepoint for alpha[t] / delta[t]
  std::string group;     // nu rows
  std::string category;  // categorical channels
  std::function<double(const ParamBlock&)> value;
};

/// Offsets into the unconstrained vector for one coefficient set; -1 marks
/// absent blocks. Positive parameters live on the log scale.
struct SetOffsets {
  int beta = -1;        // K_fixed entries
  int a = -1;
  int omega_alpha = -1; // D-1 entries (increments or their raw z)
  int tau_alpha = -1;
  int omega = -1;       // K_varying * D entries, column k at k*D
  int tau = -1;         // K_varying entries
};

struct ChannelOffsets {
  std::vector<SetOffsets> sets;
  int aux = -1;
  int random_col0 = -1; // this channel's first column in the global nu matrix
};

/// Maps the sampler's flat unconstrained vector to structured parameters and
/// names every constrained quantity exactly as the draws table does.
class ParamLayout {
 public:
  static ParamLayout build(const DesignSet& ds);

  int n_unconstrained() const { return total_; }
  int n_sets(int channel) const;

  ParamBlock unpack(const Eigen::VectorXd& theta) const;

  const std::vector<RegistryEntry>& registry() const { return registry_; }
  std::vector<std::string> constrained_names() const;
  void constrained_values(const ParamBlock& p, Eigen::VectorXd& out) const;

  /// Label a group for nu parameter names: the raw id, prefixed by the group
  /// column name when ids are purely numeric.
  static std::string group_label(const PanelData& data, int g);

  // layout facts logpost needs for gradient bookkeeping
  const DesignSet& design() const { return *ds_; }
  const std::vector<ChannelOffsets>& channel_offsets() const {
    return offsets_;
  }
  int sigma_nu_offset() const { return sigma_nu_; }
  int nu_offset() const { return nu_; }
  int cpc_offset() const { return cpc_; }
  bool splines_noncentered() const { return splines_noncentered_; }
  bool nu_noncentered() const { return nu_noncentered_; }
  bool nu_correlated() const { return nu_correlated_; }
  int spline_df() const { return D_; }
  int n_random() const { return M_; }
  int n_groups() const { return N_; }

 private:
  void build_registry();

  const DesignSet* ds_ = nullptr;
  bool splines_noncentered_ = false;
  bool nu_noncentered_ = true;
  bool nu_correlated_ = true;
  int D_ = 0;
  int M_ = 0;
  int N_ = 0;
  int total_ = 0;
  int sigma_nu_ = -1;
  int nu_ = -1; // N*M entries, group-major
  int cpc_ = -1; // M(M-1)/2 entries, lower triangle row-major
  std::vector<ChannelOffsets> offsets_;
  std::vector<RegistryEntry> registry_;
};

/// Lower-Cholesky correlation factor from unconstrained canonical partial
/// correlations y (lower triangle, row-major), via r = tanh(y).
Eigen::MatrixXd cholesky_corr_from_cpc(const Eigen::VectorXd& y, int M);

} // namespace dmp
