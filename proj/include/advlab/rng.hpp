#pragma once

#include <cstdint>
#include <string_view>

namespace advlab {

// Counter-based generator (splitmix64 finalizer over key + counter).
// Streams are derived by name or index, so every draw is a pure function of
// (seed, derivation path, counter) and adding a new consumer never shifts
// the draws of an existing one.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ kPhi)) {}

    Rng fork(std::string_view tag) const { return Rng(mix(key_ ^ fnv1a(tag)), 0); }
    Rng fork(std::uint64_t salt) const { return Rng(mix(key_ ^ mix(salt + kPhi)), 0); }

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * kPhi); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    // Uniform integer in [0, n). n must be nonzero.
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

private:
    Rng(std::uint64_t key, std::uint64_t ctr) : key_(key), counter_(ctr) {}

    static constexpr std::uint64_t kPhi = 0x9E3779B97F4A7C15ull;

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xBF58476D1CE4E5B9ull;
        z ^= z >> 27;
        z *= 0x94D049BB133111EBull;
        z ^= z >> 31;
        return z;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xCBF29CE484222325ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001B3ull;
        }
        return h;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace advlab
