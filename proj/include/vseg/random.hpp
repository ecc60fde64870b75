#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace vseg {

// Derives a child seed from a parent seed and a stream tag (splitmix64 finalizer).
// Used so that every sample / rater / step draws from its own deterministic stream.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seeded generator with platform-stable output. std::mt19937_64 is bit-exact by
// the standard; the distributions here are hand-rolled because the standard
// library's are implementation-defined.
class RandomGen {
public:
    explicit RandomGen(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * double(n)) % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller; pairs are cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0,1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <class S>
    void fill_normal(std::span<S> out, double stddev = 1.0) {
        for (auto& v : out) v = static_cast<S>(stddev * normal());
    }

    template <class S>
    void fill_uniform(std::span<S> out, double lo, double hi) {
        for (auto& v : out) v = static_cast<S>(uniform(lo, hi));
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace vseg
