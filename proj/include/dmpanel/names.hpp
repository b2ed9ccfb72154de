#pragma once

#include <string>

namespace dmp {

/// "beta_y_z", "tau_y_x", "sigma_nu_y_alpha"; categorical adds the category
/// as a final suffix ("beta_x_z_B").
inline std::string coef_name(const std::string& prefix,
                             const std::string& response,
                             const std::string& column,
                             const std::string& category = "") {
  std::string out = prefix + "_" + response + "_" + column;
  if (!category.empty()) out += "_" + category;
  return out;
}

/// "alpha_y", "sigma_y", "tau_alpha_y"; categorical "alpha_x_B".
inline std::string scalar_name(const std::string& prefix,
                               const std::string& response,
                               const std::string& category = "") {
  std::string out = prefix + "_" + response;
  if (!category.empty()) out += "_" + category;
  return out;
}

} // namespace dmp
