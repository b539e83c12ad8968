// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace eloforge {

// FNV-1a over a byte string; used to derive per-tensor RNG keys from names.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// splitmix64 finalizer: bijective mix of a 64-bit word.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based generator: stateless apart from (key, counter), so streams
// keyed by seed^fnv1a64(name) are independent of draw order elsewhere.
class CounterRng {
public:
    explicit CounterRng(uint64_t key) : key_(key) {}

    CounterRng(uint64_t seed, std::string_view name)
        : key_(seed ^ fnv1a64(name)) {}

    uint64_t next_u64() { return mix64(key_ + 0x632be59bd9b4e019ull * ++ctr_); }

    // Uniform in [0, 1); 53-bit mantissa.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Standard normal via Box-Muller; caches the second value.
    double next_gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = next_unit();
        double u2 = next_unit();
        // Avoid log(0).
        while (u1 <= 0.0) u1 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // Uniform integer in [0, n) via rejection-free modulo of a wide draw.
    uint64_t uniform_int(uint64_t n) {
        // 128-bit multiply trick keeps bias under 2^-64.
        unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * n;
        return static_cast<uint64_t>(wide >> 64);
    }

private:
    uint64_t key_ = 0;
    uint64_t ctr_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace eloforge
