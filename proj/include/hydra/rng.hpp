// Copyright (c) 2026 The hydra-peft authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "hydra/matrix.hpp"

#include <cmath>
#include <cstdint>

namespace hydra {

// Seedable 64-bit generator. The update is splitmix64 (Steele, Lea, Flood),
// chosen because the whole state is one word and the stream is identical on
// every platform, so checkpoints and experiment reports replay exactly.
//
//   state += 0x9E3779B97F4A7C15
//   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
//
// Uniform doubles take the top 53 bits; gaussians come from Box-Muller on
// consecutive uniform pairs. Single-owner: never share one Rng across threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1]; safe as a log argument.
    double next_uniform_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

/// Stateless mix of a seed with stream tags; used to derive independent
/// deterministic substreams (per example, per epoch, per worker).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag_a,
                              std::uint64_t tag_b = 0) {
    Rng r(seed ^ (tag_a * 0xD6E8FEB86659FD93ULL) ^ (tag_b * 0xA5A5A5A5A5A5A5A5ULL));
    return r.next_u64();
}

/// rows x cols matrix of i.i.d. N(0, sigma^2) draws via Box-Muller.
/// sigma == 0 returns an exact zero matrix without consuming the generator.
inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double sigma) {
    if (sigma < 0.0) throw ContractError("gaussian: sigma must be >= 0");
    Matrix out(rows, cols);
    if (sigma == 0.0) return out;
    constexpr double two_pi = 6.283185307179586476925286766559;
    auto& d = out.data();
    const std::size_t n = d.size();
    for (std::size_t i = 0; i < n; i += 2) {
        const double u1 = rng.next_uniform_open();
        const double u2 = rng.next_uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        d[i] = sigma * radius * std::cos(two_pi * u2);
        if (i + 1 < n) d[i + 1] = sigma * radius * std::sin(two_pi * u2);
    }
    return out;
}

} // namespace hydra
