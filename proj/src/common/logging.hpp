// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>

namespace tdnnq {

// Verbosity from TDNNQ_LOG: 0 = quiet (default), 1 = info, 2 = debug.
inline int log_level() {
  static const int level = [] {
    const char* env = std::getenv("TDNNQ_LOG");
    return env ? std::atoi(env) : 0;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[tdnnq] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[tdnnq:debug] " << msg << "\n";
}

}  // namespace tdnnq
