#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace omni {

// 64-bit FNV-1a. The running value doubles as the seed parameter, so
// multi-buffer digests chain: h = fnv1a64(b, nb, fnv1a64(a, na)).
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

} // namespace omni
