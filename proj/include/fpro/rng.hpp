#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace fpro {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Counter-based generator: every draw is a pure function of (seed, counter),
// so the full state is two integers and replay is exact. Named forks give
// independent streams whose draws do not depend on call order elsewhere.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    static Rng fork(uint64_t seed, std::string_view stream) {
        return Rng(splitmix64(seed ^ fnv1a64(stream)));
    }
    Rng fork(std::string_view stream) const { return fork(seed_, stream); }

    uint64_t next_u64() { return splitmix64(seed_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    // Box-Muller; two counter draws per value, no cached spare.
    double normal() {
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double truncated_normal(double lim = 2.0) {
        for (;;) {
            double z = normal();
            if (std::abs(z) <= lim) return z;
        }
    }

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

private:
    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace fpro
