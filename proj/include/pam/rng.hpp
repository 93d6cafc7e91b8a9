#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace pam {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Counter-based generator: output i is a pure function of (key, i), so any
/// stream is reproducible from its key alone. Keys derive from a global seed
/// plus a purpose string (e.g. a parameter path), which keeps initialization
/// independent of construction order.
class CounterRng {
  public:
    explicit CounterRng(uint64_t key) : key_(key) {}

    static CounterRng for_path(uint64_t seed, const std::string& path) {
        return CounterRng(splitmix64(seed ^ fnv1a64(path)));
    }

    uint64_t next_u64() { return splitmix64(key_ + 0x632be59bd9b4e019ull * ++counter_); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller, one cached value.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            const int64_t j = static_cast<int64_t>(below(static_cast<uint64_t>(i + 1)));
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

    uint64_t state_counter() const { return counter_; }

  private:
    uint64_t key_ = 0;
    uint64_t counter_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pam
