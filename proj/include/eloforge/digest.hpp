// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace eloforge {

// Streaming SHA-256, hex-encoded. Thin RAII wrapper over libcrypto EVP.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, size_t len);
    void update(const std::string& s) { update(s.data(), s.size()); }

    // Finalizes and returns 64 lowercase hex chars. Call at most once.
    std::string hex_digest();

private:
    void* ctx_ = nullptr;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

} // namespace eloforge
