#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>

namespace fnetar {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything derives from Error so callers can catch broadly;
// the CLI maps these onto exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Extent/dimension mismatch between tensors.
struct ShapeError : Error {
    using Error::Error;
};

/// Non-scalar where a scalar is required, or rank outside what an op supports.
struct RankError : Error {
    using Error::Error;
};

/// Argument outside an operation's domain (n = 0, non-power-of-two length, ...).
struct DomainError : Error {
    using Error::Error;
};

/// A softmax row with no admissible entries.
struct DegenerateError : DomainError {
    using DomainError::DomainError;
};

/// Invalid model or training configuration.
struct ConfigError : Error {
    using Error::Error;
};

/// Out-of-range token id or index.
struct IndexError : Error {
    using Error::Error;
};

/// NaN/Inf produced where finite values are required. Fatal by policy.
struct NumericError : Error {
    using Error::Error;
};

/// Corrupt, truncated, or mismatched checkpoint / vocab file.
struct IntegrityError : Error {
    using Error::Error;
};

/// File could not be opened or written.
struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Logging. Level comes from FNETAR_LOG={error|info|debug}; default is error.
// Diagnostics go to stderr so stdout stays machine-readable.
// ---------------------------------------------------------------------------

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level();

void log_line(LogLevel level, const std::string& msg);

inline void log_error(const std::string& msg) { log_line(LogLevel::kError, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::kInfo, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::kDebug, msg); }

// ---------------------------------------------------------------------------
// Deterministic RNG. Box-Muller on top of mt19937_64 so that normal draws do
// not depend on the standard library's unspecified normal_distribution.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return gen_() % n; }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace fnetar
