#pragma once

#include <cstdint>
#include <string_view>

namespace nfuse {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// splitmix64 finalizer
inline uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
}

// Counter-based per-tensor random stream. The stream key is
// seed ^ fnv1a64(tensor_name); draw j is a pure function of (key, j), so any
// execution order or parallel split reproduces identical decisions.
struct TensorRng {
    uint64_t key;

    TensorRng(uint64_t seed, std::string_view tensor_name)
        : key(seed ^ fnv1a64(tensor_name)) {}

    uint64_t bits(uint64_t j) const {
        return mix64(key + (j + 1) * 0x9e3779b97f4a7c15ull);
    }

    // j-th draw, uniform in [0, 1)
    double uniform(uint64_t j) const {
        return double(bits(j) >> 11) * 0x1.0p-53;
    }
};

} // namespace nfuse
