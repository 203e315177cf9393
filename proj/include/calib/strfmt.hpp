#pragma once

#include <cstdio>
#include <string>

namespace calib {

// %.17g round-trips IEEE doubles exactly and never emits a locale-dependent
// separator (the process never calls setlocale).
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace calib
