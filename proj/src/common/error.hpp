// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tdnnq {

enum class ErrorKind {
  invalid_argument,
  invalid_input,   // non-finite or otherwise malformed numeric data
  dimension,
  io,
  format,
  config,
  overflow_risk,
  diverged,
  internal,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::invalid_input: return "invalid_input";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::config: return "config";
    case ErrorKind::overflow_risk: return "overflow_risk";
    case ErrorKind::diverged: return "diverged";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

}  // namespace tdnnq
