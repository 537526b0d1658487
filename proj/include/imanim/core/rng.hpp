#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <string>

namespace imanim {

// Deterministic RNG wrapper. mt19937_64 gives a standardized bit stream;
// the distributions are hand-rolled because the std ones are
// implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    // inclusive range, unbiased enough for corpus-scale draws
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(engine_() % span);
    }

    // Box-Muller with one cached value
    float normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = static_cast<float>(r * std::sin(a));
        has_cached_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    std::string state() const {
        uint32_t bits = 0;
        std::memcpy(&bits, &cached_, sizeof(bits));
        std::ostringstream os;
        os << engine_ << " " << (has_cached_ ? 1 : 0) << " " << bits;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        uint32_t bits = 0;
        is >> engine_ >> flag >> bits;
        std::memcpy(&cached_, &bits, sizeof(bits));
        has_cached_ = flag != 0;
    }

    // Stable seed derivation (splitmix64 over the pair).
    static uint64_t derive(uint64_t base, uint64_t salt) {
        uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    bool has_cached_ = false;
    float cached_ = 0.0f;
};

// FNV-1a, used for manifest/config hashes embedded in checkpoints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace imanim
