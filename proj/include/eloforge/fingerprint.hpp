// SPDX-License-Identifier: Apache-2.0
#pragma once

// Content fingerprinting over named tensor sets: SHA-256 of (sorted canonical
// names, dtype, shape dims, raw little-endian f32 bytes). Stable across
// process runs and in-memory construction order; shared by model lineage,
// surgery guards, and checkpoint integrity.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "eloforge/digest.hpp"
#include "eloforge/tensor.hpp"

namespace eloforge {

inline void append_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void append_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

// f32 buffer -> little-endian byte string, independent of host order.
inline std::string f32_le_bytes(const float* data, size_t n) {
    std::string out;
    out.resize(n * 4);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), data, n * 4);
    } else {
        for (size_t i = 0; i < n; ++i) {
            uint32_t bits;
            std::memcpy(&bits, data + i, 4);
            out[4 * i + 0] = char(bits & 0xff);
            out[4 * i + 1] = char((bits >> 8) & 0xff);
            out[4 * i + 2] = char((bits >> 16) & 0xff);
            out[4 * i + 3] = char((bits >> 24) & 0xff);
        }
    }
    return out;
}

inline void f32_from_le_bytes(const char* src, float* dst, size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(dst, src, n * 4);
    } else {
        for (size_t i = 0; i < n; ++i) {
            uint32_t bits = (uint32_t(uint8_t(src[4 * i])) ) |
                            (uint32_t(uint8_t(src[4 * i + 1])) << 8) |
                            (uint32_t(uint8_t(src[4 * i + 2])) << 16) |
                            (uint32_t(uint8_t(src[4 * i + 3])) << 24);
            std::memcpy(dst + i, &bits, 4);
        }
    }
}

inline std::string fingerprint_tensors(std::vector<std::pair<std::string, Tensor>> named) {
    std::sort(named.begin(), named.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Sha256 h;
    for (const auto& [name, t] : named) {
        h.update(name);
        h.update(std::string("\0f32\0", 5));
        std::string dims;
        append_u64_le(dims, t.shape().size());
        for (size_t d : t.shape()) append_u64_le(dims, d);
        h.update(dims);
        h.update(f32_le_bytes(t.data().data(), t.numel()));
    }
    return h.hex_digest();
}

}  // namespace eloforge
