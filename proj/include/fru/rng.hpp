#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fru {

// All randomness in a run is derived from one global seed through named
// substreams, so any component can be replayed in isolation.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
    return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

inline std::uint64_t hash_combine(std::uint64_t h, std::string_view tag) {
    for (char c : tag) h = hash_combine(h, static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream) {
    return hash_combine(splitmix64(global_seed), stream);
}

inline std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream,
                                 std::uint64_t round, std::uint64_t client) {
    std::uint64_t h = derive_seed(global_seed, stream);
    h = hash_combine(h, round);
    h = hash_combine(h, client);
    return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace fru
