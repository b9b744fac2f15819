#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace pgat {

// Deterministic PRNG used everywhere seeds matter. We avoid <random>
// distributions on purpose: their output is implementation-defined, and
// datasets, parameter init and shuffles must be bit-identical across
// platforms and compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // splitmix64
    uint64_t next() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1), 53 bits
    double uniform01() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next() % n; }

    // Box-Muller from our own uniforms
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a 64-bit, used for hashing tokens and salting seeds
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Derive an independent seed from a base seed and a list of salts.
inline uint64_t mix_seed(uint64_t base, std::initializer_list<uint64_t> salts) {
    Rng r(base);
    uint64_t h = r.next();
    for (uint64_t s : salts) {
        h ^= s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        Rng r2(h);
        h = r2.next();
    }
    return h;
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag) {
    return mix_seed(base, {fnv1a64(tag)});
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag, uint64_t a) {
    return mix_seed(base, {fnv1a64(tag), a});
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag, uint64_t a, uint64_t b) {
    return mix_seed(base, {fnv1a64(tag), a, b});
}

}  // namespace pgat
