#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace bdf {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Folds a path of integers (seed, replicate, chain, ...) into one key.
// Distinct paths give statistically independent keys.
constexpr std::uint64_t derive_key(std::initializer_list<std::uint64_t> path) noexcept
{
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (auto p : path) {
        h = mix64(h ^ mix64(p));
    }
    return h;
}

// Uniform on [0, 1) addressed by key; no generator state, so any (draw, unit,
// slot) triple can be evaluated in any order with the same result.
constexpr double counter_uniform(std::uint64_t key) noexcept
{
    return static_cast<double>(mix64(key) >> 11) * 0x1.0p-53;
}

inline Rng make_stream(std::initializer_list<std::uint64_t> path)
{
    const std::uint64_t k = derive_key(path);
    std::seed_seq seq{static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    return Rng(seq);
}

} // namespace bdf
