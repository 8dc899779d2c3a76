#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace uniclam {

/// Error for contract violations: bad shapes, non-finite values, malformed
/// files. Messages name the offending operation and operands.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a training step produces non-finite values.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 with explicit stream derivation; no
// std::uniform_* (their output is implementation-defined).
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// FNV-1a over a string; used to derive independent RNG streams by name.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // burn one output so seed 0 does not start at the fixed point
        splitmix64(state_);
    }
    Rng(std::uint64_t seed, const std::string& stream) : Rng(mix_seed(seed, fnv1a(stream))) {}

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// uniform in [0, 1)
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// uniform integer in [0, n)
    int next_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    /// standard normal via Box-Muller (deterministic, one draw per call)
    double next_gaussian() {
        double u1 = next_unit(), u2 = next_unit();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_;
};

template <class S>
inline bool is_finite(S v) {
    return std::isfinite(static_cast<double>(v));
}

}  // namespace uniclam
