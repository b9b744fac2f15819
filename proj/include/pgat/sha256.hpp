#pragma once

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

namespace pgat {

// Minimal SHA-256 (FIPS 180-4). Used for dataset manifests and checkpoint
// integrity; no external crypto dependency.
class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    // finalize and return lowercase hex digest; object must not be reused
    std::string hex_digest();

    static std::string of(const void* data, size_t len);
    static std::string of(const std::vector<uint8_t>& bytes);
    static std::string of(const std::string& s);

private:
    void process_block(const uint8_t* block);

    uint32_t state_[8];
    uint64_t bit_len_ = 0;
    uint8_t buffer_[64];
    size_t buffer_len_ = 0;
};

}  // namespace pgat
