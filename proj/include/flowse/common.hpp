#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace flowse {

// Error taxonomy used across the library. The CLI maps these onto exit codes
// (config -> 2, divergence -> 3, io/format -> 1).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t rotl64(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Derives a child seed from a base seed and up to three salts. Used to give
// every (step, item, purpose) its own deterministic random stream.
inline uint64_t derive_seed(uint64_t base, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = base;
    uint64_t out = detail::splitmix64(s);
    s ^= a * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
    out ^= detail::splitmix64(s);
    s ^= b * 0x9e6c63d0876a9a47ULL + 0xda942042e4dd58b5ULL;
    out ^= detail::splitmix64(s);
    s ^= c * 0x8cb92ba72f3d8dd7ULL + 0x82b2b726a9278917ULL;
    out ^= detail::splitmix64(s);
    return out;
}

// Self-contained xoshiro256++ generator. std:: distributions are not pinned
// across standard library versions, so all randomness in the library goes
// through this class to keep runs bit-reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) {
            word = detail::splitmix64(sm);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = detail::rotl64(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl64(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    int uniform_int(int n) {
        if (n <= 0) {
            throw DomainError("Rng::uniform_int: n must be positive");
        }
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t bound = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = next_u64();
        while (x >= bound) {
            x = next_u64();
        }
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) {
        return uniform() < p;
    }

    // Standard normal via Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mu, double sigma) {
        return mu + sigma * normal();
    }

private:
    uint64_t state_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace flowse
