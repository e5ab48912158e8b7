#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace pgx {

// Counter-based generator: every draw is a pure function of
// (seed, stream name, stream id, counter), so any consumer can be given
// its own named stream and replay is exact regardless of draw order
// elsewhere in the program.
namespace rng_detail {

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace rng_detail

class RngStream {
public:
    RngStream(uint64_t seed, std::string_view name, uint64_t id = 0) {
        using namespace rng_detail;
        base_ = mix64(seed ^ mix64(fnv1a(name)) ^ mix64(id * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
    }

    uint64_t next_u64() { return rng_detail::mix64(base_ + 0x9e3779b97f4a7c15ull * counter_++); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        // rejection-free modulo bias is negligible for n << 2^64; keep exact anyway
        uint64_t limit = ~0ull - ~0ull % static_cast<uint64_t>(n);
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<int64_t>(v % static_cast<uint64_t>(n));
    }

    // Box-Muller; consumes two uniforms per call so the stream layout is fixed.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // truncated at two standard deviations
    double truncated_normal(double stddev) {
        double v = normal();
        while (std::fabs(v) > 2.0) v = normal();
        return v * stddev;
    }

    uint64_t counter() const { return counter_; }

private:
    uint64_t base_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace pgx
