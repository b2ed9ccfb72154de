#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace dmp {

/// Shortest decimal text that reads back to exactly the same double.
inline std::string fmt_num(double x) {
  char buf[40];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

/// Fixed 17-significant-digit form used for lossless draw serialization.
inline std::string fmt_full(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

} // namespace dmp
