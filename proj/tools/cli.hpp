#pragma once

#include <ostream>

namespace clamp::cli {

/// Exit statuses of the command-line tool.
enum ExitCode : int {
    kOk = 0,
    kInternalError = 1,
    kInputError = 2,
    kConfigMismatch = 3,
};

/// Parses and runs one invocation of the `clamp` tool, writing progress to
/// `out` and diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace clamp::cli
