#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace facecloak {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Runs `facecloak <args...>` (args exclude the program name). The human
// summary goes to `out`, diagnostics to `err`; returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace facecloak
