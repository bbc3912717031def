#pragma once

// Deterministic random source used by every stochastic routine in the
// library. std::mt19937_64 has standard-specified output, and the uniform /
// gaussian transforms below are written out explicitly (instead of going
// through std::uniform_real_distribution / std::normal_distribution, whose
// algorithms are implementation-defined), so a given seed produces the same
// stream on every platform.
//
// Batched work splits determinism by seeding sub-ranges with seed ^ index;
// see parallel.hpp for how results are merged back in index order.

#include <cmath>
#include <cstdint>
#include <random>

#include "linalg.hpp"

namespace obprop {

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller. Caches the second variate of each pair.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;  // 2*pi
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Vector gaussian_vector(std::size_t n, double scale = 1.0) {
        Vector v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = gaussian() * scale;
        return v;
    }

    // Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo is biased for huge n; all our n are tiny
        // (vocab sizes), so take the simple route but keep it documented.
        return gen_() % n;
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline std::uint64_t subrange_seed(std::uint64_t seed, std::uint64_t index) {
    return seed ^ index;
}

}  // namespace obprop
