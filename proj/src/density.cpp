#include "dmpanel/density.hpp"

namespace dmp {

std::vector<std::string> LogDensity::value_names() const {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(dim()));
  for (int i = 0; i < dim(); ++i) out.push_back("q[" + std::to_string(i + 1) + "]");
  return out;
}

void LogDensity::values(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const {
  out = theta;
}

} // namespace dmp
