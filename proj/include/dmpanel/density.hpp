#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dmp {

/// A differentiable log density over an unconstrained vector, plus the map
/// to the (possibly transformed) values worth reporting. The default report
/// is the identity with names q[1], q[2], ...
class LogDensity {
 public:
  virtual ~LogDensity() = default;

  virtual int dim() const = 0;
  /// Returns the log density and fills grad (resized to dim()). Non-finite
  /// evaluations must return -inf with a finite (e.g. zero) gradient.
  virtual double value_and_grad(const Eigen::VectorXd& theta,
                                Eigen::VectorXd& grad) const = 0;

  virtual std::vector<std::string> value_names() const;
  virtual void values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const;
};

} // namespace dmp
