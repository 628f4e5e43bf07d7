#pragma once
// Command-line surface: dataset generation, training, checkpoint evaluation,
// ablation grids, and report tables. Implemented as a library entry point so
// the whole surface is testable in-process; the `mat` binary is a thin shim.

#include <ostream>
#include <string>
#include <vector>

namespace mat::cli {

// Stable exit codes. kExitUsage also covers a grid run with failed cells.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConfig = 2;     // invalid or conflicting configuration
inline constexpr int kExitIo = 3;         // missing, unreadable, or corrupt files
inline constexpr int kExitNonFinite = 4;  // training aborted on non-finite loss

// Parses and executes one invocation. `args` excludes the program name.
// Human-readable progress goes to `out` and diagnostics to `err`; the final
// line written to `out` is always a single JSON object, even on failure.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace mat::cli
