#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace convseq {

// Exit codes of run_cli.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitCheckFailed = 3 };

// Entry point of the `convseq` tool. `args` excludes the program name.
// Metrics go to `out` as JSON lines; diagnostics and usage go to `err`.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace convseq
