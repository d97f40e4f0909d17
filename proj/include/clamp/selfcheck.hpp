#pragma once
// Property suite shared by `clamp selfcheck` and the acceptance runner. Each
// check builds its own oracle (explicit loops, closed forms, hand-computed
// values) and compares the library against it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace clamp {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

struct SelfcheckOptions {
    std::uint64_t seed = 0;
    /// Scratch space for the overfit run (training log and checkpoints).
    std::filesystem::path work_dir;
    /// The overfit check trains for about a minute; off skips it.
    bool include_training = true;
};

struct NamedCheck {
    std::string name;
    std::function<CheckResult(const SelfcheckOptions&)> run;
    bool training = false;
    /// Wall-clock limit in seconds; 0 means none.
    double budget_seconds = 0.0;
};

const std::vector<NamedCheck>& selfcheck_registry();

/// Runs one check; exceptions become a failed result carrying the message.
CheckResult run_check(const NamedCheck& check, const SelfcheckOptions& options);

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options);

}  // namespace clamp
