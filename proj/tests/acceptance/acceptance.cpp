// One PASS/FAIL line per acceptance criterion; exit status 1 when any fails.
#include <cstdio>
#include <filesystem>
#include <string>

#include "clamp/selfcheck.hpp"

namespace {

struct Criterion {
    const char* check;
    const char* label;
};

constexpr Criterion kCriteria[] = {
    {"gradient_oracle", "gradient oracle (spatial and feature loss vs central differences)"},
    {"feature_closed_forms", "feature-loss closed forms (log 17, log(1 + 16/e))"},
    {"codec_round_trip", "heatmap codec round trip and Gaussian values"},
    {"score_map_oracle", "score-map inner-product oracle"},
    {"bilinear_oracle", "bilinear keypoint sampling oracle"},
    {"permutation_suite", "keypoint permutation suite"},
    {"masking_suite", "invisible keypoint masking suite"},
    {"overfit_smoke", "overfit smoke test on synthetic blobs"},
    {"schedule_check", "step learning-rate schedule"},
    {"evaluator_oracle", "OKS evaluator oracle"},
    {"baseline_reduction", "zero-weight reduction to the baseline network"},
};

}  // namespace

int main(int argc, char** argv) {
    clamp::SelfcheckOptions options;
    options.work_dir = argc > 1 ? std::filesystem::path(argv[1])
                                : std::filesystem::temp_directory_path() / "clamp-acceptance";
    int failed = 0;
    for (const auto& criterion : kCriteria) {
        for (const auto& check : clamp::selfcheck_registry()) {
            if (check.name != criterion.check) continue;
            const auto r = clamp::run_check(check, options);
            std::printf("[%s] %s: %s (%.2f s)\n", r.passed ? "PASS" : "FAIL", criterion.label, r.detail.c_str(),
                        r.seconds);
            std::fflush(stdout);
            failed += r.passed ? 0 : 1;
        }
    }
    std::printf("%d of %zu acceptance criteria passed\n", static_cast<int>(std::size(kCriteria)) - failed,
                std::size(kCriteria));
    return failed == 0 ? 0 : 1;
}
