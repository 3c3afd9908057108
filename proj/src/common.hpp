#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ocf {

enum class Errc {
    invalid_argument,  // caller broke a precondition
    data_error,        // corrupt or inconsistent file contents
    io_error,          // filesystem failure
    internal,          // broken invariant inside the library
};

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    Errc code() const { return code_; }

  private:
    Errc code_;
};

inline void require(bool cond, Errc code, const std::string& msg) {
    if (!cond) throw Error(code, msg);
}

// 64-bit FNV-1a, used for artifact hashing and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    // splitmix64 finalizer over the pair
    uint64_t z = seed + 0x9e3779b97f4a7c15ull + tag * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// uniform/normal transforms are hand-rolled so streams do not depend on the
// standard library's distribution implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        require(n > 0, Errc::invalid_argument, "uniform_index: empty range");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // standard normal via Box-Muller; caches the second deviate
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ocf
