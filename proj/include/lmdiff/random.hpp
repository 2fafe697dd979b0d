// Counter-based random streams. A draw is a pure function of
// (seed, stream_id, counter), so results do not depend on worker count
// or call interleaving; forking derives an independent stream.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace lmdiff {

namespace detail {

inline uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

inline uint64_t hash_label(std::string_view label) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace detail

struct RandomStream {
    uint64_t seed = 0;
    uint64_t stream_id = 0;
    uint64_t counter = 0;

    uint64_t next_u64() {
        const uint64_t k0 = detail::mix64(seed + 0x9e3779b97f4a7c15ull);
        const uint64_t k1 = detail::mix64(k0 ^ stream_id);
        const uint64_t v = detail::mix64(k1 + counter * 0xd1342543de82ef95ull);
        counter += 1;
        return v;
    }

    // uniform in [0, 1), 53-bit resolution
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_normal() {
        // Box-Muller, cosine branch only: exactly two counter ticks per draw.
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // uniform integer in [0, n), n >= 1
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>(next_uniform() * static_cast<double>(n)) % n;
    }

    RandomStream fork(uint64_t child) const {
        return RandomStream{seed, detail::mix64(stream_id ^ detail::mix64(child + 0x632be59bd9b4e019ull)), 0};
    }

    RandomStream fork(std::string_view label) const {
        return fork(detail::hash_label(label));
    }
};

}  // namespace lmdiff
