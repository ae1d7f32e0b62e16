#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace hgen {

// splitmix64 step, used to derive independent named streams from a master
// seed so that every stochastic stage owns its own generator.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Named sub-stream; stable in (seed, name).
    static Rng stream(uint64_t master_seed, const std::string& name) {
        uint64_t s = master_seed ^ fnv1a64(name);
        return Rng(splitmix64(s));
    }
    static Rng stream(uint64_t master_seed, const std::string& name, uint64_t index) {
        uint64_t s = master_seed ^ fnv1a64(name);
        s ^= 0x9E3779B97F4A7C15ULL * (index + 1);
        return Rng(splitmix64(s));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double gaussian() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
    int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
        return std::uniform_int_distribution<int64_t>(lo, hi_inclusive)(engine_);
    }
    uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

}  // namespace hgen
