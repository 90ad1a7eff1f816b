#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace csid {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stream seeds derived from a root seed plus coordinates, so that the
// random stream of one (step, sample) pair never depends on evaluation order.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(root);
    h = splitmix64(h ^ splitmix64(a + 0x1234567ULL));
    h = splitmix64(h ^ splitmix64(b + 0x89abcdefULL));
    h = splitmix64(h ^ splitmix64(c + 0x13579bdfULL));
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(root ^ fnv1a(name));
}

inline double uniform01(Rng& rng) {
    // 53-bit mantissa draw in [0, 1)
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller on top of uniform01, so results do not depend on the standard
// library's distribution implementation.
inline double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
    const auto span = static_cast<std::uint64_t>(hi_inclusive - lo + 1);
    return lo + static_cast<int>(rng() % span);
}

}  // namespace csid
