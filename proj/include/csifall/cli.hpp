#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace csifall {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Subcommands: synth, train, eval, loeo, stream, inspect. Returns the process exit code.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace csifall
