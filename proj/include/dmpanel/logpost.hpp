#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dmpanel/density.hpp"
#include "dmpanel/params.hpp"
#include "dmpanel/priors.hpp"

namespace dmp {

/// Log posterior over the unconstrained parameter vector: masked-cell
/// likelihood, coefficient priors, random-walk spline priors, random-effect
/// priors, and the Jacobians of the constraining transforms. Keeps only
/// references; the design set and layout must outlive the model. Evaluation
/// is const and side-effect free, so chains may share one instance.
class PosteriorModel : public LogDensity {
 public:
  PosteriorModel(const ParamLayout& layout, std::vector<PriorSpec> priors);

  int dim() const override { return layout_.n_unconstrained(); }

  double value(const Eigen::VectorXd& theta) const;
  /// Returns the log posterior and fills grad (resized to dim()). Non-finite
  /// evaluations return -inf with a zero gradient.
  double value_and_grad(const Eigen::VectorXd& theta,
                        Eigen::VectorXd& grad) const override;

  std::vector<std::string> value_names() const override;
  void values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const override;

  const ParamLayout& layout() const { return layout_; }
  const std::vector<PriorSpec>& priors() const { return priors_; }

 private:
  double evaluate(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const;
  const PriorSpec& prior_for(const std::string& parameter) const;

  const ParamLayout& layout_;
  std::vector<PriorSpec> priors_;

  // bindings resolved at construction, indexed like the layout
  struct SetPriorRefs {
    std::vector<const PriorSpec*> beta; // K_fixed; [0] is alpha when present
    const PriorSpec* a = nullptr;
    const PriorSpec* tau_alpha = nullptr;
    std::vector<const PriorSpec*> omega1; // delta priors on first coefs
    std::vector<const PriorSpec*> tau;
  };
  struct ChannelPriorRefs {
    std::vector<SetPriorRefs> sets;
    const PriorSpec* aux = nullptr;
  };
  std::vector<ChannelPriorRefs> bindings_;
  std::vector<const PriorSpec*> sigma_nu_priors_;
  double lkj_eta_ = 1.0;
};

/// Adds d log p / d y for the partial-correlation coordinates given the
/// gradient with respect to the Cholesky factor built from them.
void cpc_backward(const Eigen::VectorXd& y, int M, const Eigen::MatrixXd& dL,
                  Eigen::VectorXd& dy);

} // namespace dmp
