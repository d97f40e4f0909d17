#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace clamp {

/// Portable deterministic generator (splitmix64). Standard-library
/// distributions are implementation-defined, so every draw used for splits,
/// shuffles, augmentation and initialisation goes through this type.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, bound) without modulo bias.
    std::uint64_t below(std::uint64_t bound);
    double normal(double mean = 0.0, double stddev = 1.0);
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// FNV-1a, stable across platforms.
std::uint64_t stable_hash(std::string_view text);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace clamp
