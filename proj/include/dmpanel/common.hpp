#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dmp {

/// Error classes map to CLI exit codes: io = 1, spec = 2, numeric = 3.
enum class ErrorKind { io = 1, spec = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

private:
  ErrorKind kind_;
};

inline Error io_error(const std::string& msg) { return Error(ErrorKind::io, msg); }
inline Error spec_error(const std::string& msg) { return Error(ErrorKind::spec, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::numeric, msg); }

using Warnings = std::vector<std::string>;

} // namespace dmp
