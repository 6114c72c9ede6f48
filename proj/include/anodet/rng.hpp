#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace anodet {

/// Uniform integer in [0, n) using rejection sampling on a 64-bit engine.
/// Unlike std::uniform_int_distribution the sequence is identical across
/// standard library implementations.
inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
    const std::uint64_t limit = std::mt19937_64::max() - std::mt19937_64::max() % n;
    std::uint64_t draw = rng();
    while (draw >= limit) draw = rng();
    return draw % n;
}

template <typename T>
void portable_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace anodet
