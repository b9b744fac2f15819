#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pgat {

inline constexpr int kTextDim = 32;
inline constexpr int kHashBuckets = 1024;
inline constexpr uint64_t kProjectionSeed = 0xC0FFEE;

// Frozen hashed bag-of-words encoder: lowercase, trim, split on whitespace,
// FNV-1a each token into one of kHashBuckets buckets, multiply the count
// vector by a fixed random projection and L2-normalize. No learned state,
// deterministic across processes.
class TextEncoder {
public:
    TextEncoder();

    // unit-norm embedding of length kTextDim; rejects empty text
    std::vector<double> encode(const std::string& text) const;

    static std::vector<std::string> tokenize(const std::string& text);
    static int bucket_of(const std::string& token);

    // calls since construction or reset; evaluation asserts one per item
    long call_count() const { return calls_; }
    void reset_call_count() { calls_ = 0; }

private:
    std::vector<double> projection_;  // [kHashBuckets][kTextDim], row-major
    mutable long calls_ = 0;
};

}  // namespace pgat
