#pragma once

namespace calib {

inline constexpr const char* kVersion = "0.1.0";

// Generator identity recorded in reports and sidecar files. Covers both the
// engine (mt19937_64 seeded via splitmix64 mixing) and the hand-rolled
// samplers (Box-Muller normal, Marsaglia-Tsang gamma), so datasets rebuild
// identically on any standard library.
inline constexpr const char* kRngId = "mt19937_64+splitmix64/bm-mt-v1";

}  // namespace calib
