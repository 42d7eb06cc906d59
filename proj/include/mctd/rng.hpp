#pragma once

#include <cstdint>
#include <random>

namespace mctd {

using Rng = std::mt19937_64;

/// Independent random streams derived from one experiment seed. Each consumer
/// draws from its own stream so that enabling one source of randomness never
/// shifts the draws seen by another.
enum class Stream : std::uint64_t {
    generate = 1,
    missing = 2,
    folds = 3,
    split = 4,
    init = 5,
    shuffle = 6,
    temporal_mask = 7,
    hidden_dropout = 8,
    monte_carlo = 9,
};

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace mctd
