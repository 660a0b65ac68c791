#pragma once

namespace toon {

/// Exit codes: 0 success, 1 internal error, 2 configuration or usage error,
/// 3 numerical failure, 4 an expected ablation ordering failed.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitOrdering = 4;

int run_cli(int argc, char** argv);

}  // namespace toon
