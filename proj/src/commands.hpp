#pragma once

#include <string>
#include <vector>

namespace cpm::cli {

// Shared exit-code contract: 0 success, 1 usage error, 2 runtime failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

}  // namespace cpm::cli
