#pragma once

#include <cstdint>
#include <random>

namespace leakfix {

// splitmix64; used to derive independent stream seeds from a master seed.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    return splitmix64(master ^ splitmix64(stream));
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t master, uint64_t stream) { return Rng(derive_seed(master, stream)); }

inline uint32_t rand_u32(Rng& rng) { return static_cast<uint32_t>(rng()); }

inline uint8_t rand_u8(Rng& rng) { return static_cast<uint8_t>(rng()); }

} // namespace leakfix
