#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace binens {

// Deterministic random source. All distribution transforms are implemented
// here (not via std::*_distribution, whose output is implementation-defined)
// so that a given seed produces the same stream on every build.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 1) : engine_(static_cast<std::mt19937::result_type>(seed)) {}

    std::uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint32_t uniform_int(std::uint32_t n) {
        // Rejection sampling to remove modulo bias.
        const std::uint32_t limit = 4294967295u - (4294967295u % n + 1) % n;
        std::uint32_t v = next_u32();
        while (v > limit) v = next_u32();
        return v % n;
    }

    // Standard normal via Box-Muller.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Normal(0, sigma^2) truncated to [-2 sigma, 2 sigma] by rejection.
    double truncated_normal(double sigma) {
        double v = gaussian() * sigma;
        while (std::abs(v) > 2.0 * sigma) v = gaussian() * sigma;
        return v;
    }

    // Fisher-Yates shuffle, driven by uniform_int for portability.
    template <class Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = uniform_int(static_cast<std::uint32_t>(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace binens
