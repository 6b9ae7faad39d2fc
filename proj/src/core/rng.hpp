// SPDX-License-Identifier: Apache-2.0
//
// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3"). A stream is addressed by (seed, stream id):
// the seed is the 64-bit key, the stream id fills the upper two counter words
// and the lower two count blocks within the stream. Streams never overlap, so
// workers can draw from their own stream in any order with identical results.

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace snapsoup {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter counter, PhiloxKey key);

/// Mixes integers into a stream id (splitmix64 finalizer chain).
std::uint64_t stream_id(std::uint64_t domain, std::uint64_t a, std::uint64_t b = 0);

class CounterRng {
public:
    static constexpr std::string_view algorithm = "philox4x32-10";

    CounterRng(std::uint64_t seed, std::uint64_t stream);

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform01();
    /// Unbiased integer in [0, n); n must be > 0.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal (Box-Muller).
    double normal();

private:
    void refill();

    PhiloxKey key_;
    std::uint64_t stream_;
    std::uint64_t block_ = 0;
    PhiloxCounter buffer_{};
    int used_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace snapsoup
