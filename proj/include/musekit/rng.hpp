#pragma once

#include "musekit/common.hpp"

#include <cmath>
#include <cstdint>

namespace musekit {

// Deterministic 64-bit generator (splitmix64). One instance per stochastic
// call site; every stochastic operation takes an explicit RngState so the
// repo-wide draw order is auditable. State transition:
//   state += 0x9E3779B97F4A7C15
//   z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
//   z = (z ^ z>>27) * 0x94D049BB133111EB; output = z ^ z>>31
//
// Draw contracts:
//   uniform()  consumes one state step, returns a double in [0,1)
//   normal()   consumes exactly two uniforms (Box-Muller, no cached spare)
//   below(n)   consumes one uniform, returns floor(u * n)
struct RngState {
    uint64_t state = 0;

    static RngState seeded(uint64_t seed) {
        RngState r;
        r.state = seed;
        // burn one step so seed 0 and tiny seeds decorrelate immediately
        (void)r.next_u64();
        return r;
    }

    uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    double uniform() {
        return (double)(next_u64() >> 11) * 0x1.0p-53;
    }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r  = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(2.0 * kPi * u2);
    }

    // uniform integer in [0, n)
    uint32_t below(uint32_t n) {
        require(n > 0, error_kind::contract, "RngState::below requires n > 0");
        uint32_t v = (uint32_t)(uniform() * (double)n);
        return v < n ? v : n - 1;
    }

    // derive an independent stream without disturbing this one
    RngState split(uint64_t salt) const {
        uint64_t z = state ^ (0xD1B54A32D192ED03ull * (salt + 1));
        z = (z ^ (z >> 29)) * 0xFF51AFD7ED558CCDull;
        z = (z ^ (z >> 32)) * 0xC4CEB9FE1A85EC53ull;
        return seeded(z ^ (z >> 29));
    }
};

} // namespace musekit
