#pragma once
#include <cmath>
#include <cstdint>

namespace gsdn {

// splitmix64 (Steele/Lea/Flood constants: increment 0x9E3779B97F4A7C15,
// mix multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// n-th value of the splitmix64 stream seeded with `seed`; used to derive
// per-scene seeds from a master seed.
inline std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t s = seed + index * 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = splitmix64(s);
    return z;
}

// xoshiro256++ (Blackman & Vigna), state initialized from splitmix64.
// Integer stream is platform-exact; float transforms use IEEE-754 doubles.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : s_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1): 53 high bits scaled by 2^-53
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n); n > 0
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    int range(int lo, int hi_inclusive) { return lo + int(below(std::uint64_t(hi_inclusive - lo + 1))); }

    // standard normal via Box-Muller; consumes two uniforms per pair
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586476925286766559 * u2);
        have_spare_ = true;
        return mag * std::cos(6.283185307179586476925286766559 * u2);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace gsdn
