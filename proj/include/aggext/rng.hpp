#pragma once

#include <cstdint>
#include <cmath>

namespace aggext {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// xoshiro256++ seeded through splitmix64.  Substreams are derived by hashing
// (seed, stream) so that draw i of a Monte Carlo run owns its own stream:
// results are independent of batching and reproducible for a fixed seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t sm = seed ^ (0x6a09e667f3bcc909ULL + stream * 0x3c6ef372fe94f82bULL);
        s_[0] = detail::splitmix64(sm);
        s_[1] = detail::splitmix64(sm);
        s_[2] = detail::splitmix64(sm);
        s_[3] = detail::splitmix64(sm);
    }

    std::uint64_t next_u64() {
        std::uint64_t* s = s_;
        const std::uint64_t result = detail::rotl(s[0] + s[3], 23) + s[0];
        const std::uint64_t t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = detail::rotl(s[3], 45);
        return result;
    }

    // Uniform on the open interval (0,1): 53-bit mantissa, never 0 or 1.
    double uniform() {
        const std::uint64_t r = next_u64() >> 11;
        return (static_cast<double>(r) + 0.5) * 0x1.0p-53;
    }

    double exponential() { return -std::log(uniform()); }

    std::uint64_t uniform_index(std::uint64_t n) {
        // Lemire-style bounded draw without modulo bias.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
        std::uint64_t l = static_cast<std::uint64_t>(m);
        if (l < n) {
            std::uint64_t t = -n % n;
            while (l < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * static_cast<__uint128_t>(n);
                l = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

  private:
    std::uint64_t s_[4];
};

}  // namespace aggext
