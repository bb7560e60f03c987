#pragma once

#include <stdexcept>
#include <string>

namespace stal {

/// Failure category; the CLI maps each one to a process exit code.
enum class ErrorKind {
  config,   // invalid configuration or argument
  data,     // malformed, missing or inconsistent input data / files
  numeric,  // NaN/Inf, failed gradient check
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error config_error(const std::string& what) { return Error(ErrorKind::config, what); }
inline Error data_error(const std::string& what) { return Error(ErrorKind::data, what); }
inline Error numeric_error(const std::string& what) { return Error(ErrorKind::numeric, what); }

}  // namespace stal
