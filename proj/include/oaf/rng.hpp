#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace oaf {

// xoshiro256++ seeded via splitmix64. Self-contained so that streams are
// bit-identical across platforms and standard-library versions; every
// "same seed => same bytes" guarantee in the project rests on this.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1) with 53 random bits
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

    // derive an independent stream for a named sub-task
    Rng fork(std::string_view label) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) h = (h ^ uint64_t(uint8_t(c))) * 0x100000001b3ull;
        uint64_t x = s_[0] ^ h;
        return Rng(splitmix64(x));
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

} // namespace oaf
