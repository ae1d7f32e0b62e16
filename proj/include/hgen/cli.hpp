#pragma once

// Command-line surface: subcommand dispatch, config loading with environment
// overrides, run manifests, and the exit-code taxonomy.

#include <string>
#include <vector>

namespace hgen::cli {

// Exit-code taxonomy shared by all subcommands.
enum ExitCode : int {
    kOk = 0,
    kUsage = 2,     // unknown subcommand/flag, bad invocation
    kConfig = 3,    // config parse or validation failure
    kData = 4,      // missing/corrupt datasets, checkpoints, artifacts
    kNumeric = 5,   // non-finite or out-of-domain numerics
    kResource = 6,  // allocation / filesystem resource failures
};

// argv[0] is the program name. Logs line-delimited JSON records to stdout.
int run_command(const std::vector<std::string>& argv);
int run_command(int argc, const char* const* argv);

}  // namespace hgen::cli
