#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace otafl {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or malformed input file (CLI exit code 2).
class ConfigError : public Error {
 public:
    using Error::Error;
};

/// Numerical breakdown: NaN loss, failed bracket, ... (CLI exit code 3).
class NumericalError : public Error {
 public:
    using Error::Error;
};

/// All devices produced near-constant gradients, so the global spread pi is ~0.
class DegenerateVarianceError : public NumericalError {
 public:
    using NumericalError::NumericalError;
};

/// Every effective amplitude sqrt(p_k)|h_k| is zero; the receive factor is undefined.
class NoSignalError : public NumericalError {
 public:
    using NumericalError::NumericalError;
};

/// Dimension or shape disagreement between arguments.
class DimensionError : public Error {
 public:
    using Error::Error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

// ---------------------------------------------------------------------------
// Counter-based random streams.
//
// Every random quantity in the simulator is drawn from a stream addressed by a
// tuple (seed, tag, a, b, c). Two streams with different addresses are
// independent for practical purposes, and the value of a stream never depends
// on the order in which other streams were consumed. This is what makes
// channel traces, receiver noise and local SGD bit-reproducible regardless of
// thread count.
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

enum class StreamTag : std::uint64_t {
    kChannel = 1,
    kNoise = 2,
    kLocalSgd = 3,
    kPartition = 4,
    kNetInit = 5,
    kNetShuffle = 6,
    kMonteCarlo = 7,
    kData = 8,
    kModelInit = 9,
    kCalibration = 10,
};

class CounterRng {
 public:
    using result_type = std::uint64_t;

    CounterRng(std::uint64_t seed, StreamTag tag, std::uint64_t a = 0, std::uint64_t b = 0,
               std::uint64_t c = 0) noexcept
        : key_(mix(seed, static_cast<std::uint64_t>(tag), a, b, c)) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    result_type operator()() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

    /// Uniform on (0, 1); never returns exactly 0 or 1.
    double uniform() noexcept {
        return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t index(std::uint64_t n) noexcept {
        // Lemire's multiply-shift; the residual bias is below 2^-64 * n.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

 private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t tag, std::uint64_t a,
                             std::uint64_t b, std::uint64_t c) noexcept {
        std::uint64_t h = splitmix64(seed);
        h = splitmix64(h ^ (tag * 0xD6E8FEB86659FD93ull));
        h = splitmix64(h ^ a);
        h = splitmix64(h ^ (b + 0x632BE59BD9B4E019ull));
        h = splitmix64(h ^ (c + 0x85157AF5ull));
        return h;
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Fisher-Yates shuffle with a portable index draw (std::shuffle is not
/// specified bit-for-bit across standard libraries).
template <typename Container>
void shuffle(Container& items, CounterRng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = rng.index(i);
        using std::swap;
        swap(items[i - 1], items[j]);
    }
}

}  // namespace otafl
