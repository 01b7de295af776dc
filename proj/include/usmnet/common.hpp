#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <functional>
#include <ostream>
#include <istream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace usmnet {

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double norm() const;
};

inline Vec2 operator*(double s, Vec2 v) { return v * s; }

/// Affine interval [lo, hi] <-> [-1, 1].
struct AffineRange {
    double lo = -1.0, hi = 1.0;

    double half_width() const { return 0.5 * (hi - lo); }
    double center() const { return 0.5 * (hi + lo); }
    double normalize(double v) const { return (v - center()) / half_width(); }
    double denormalize(double v) const { return center() + half_width() * v; }
    void validate() const {
        if (!(hi > lo)) throw std::invalid_argument("AffineRange: empty interval");
    }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. std::uniform_real_distribution is implementation-defined,
// so draws go through fixed bit manipulation to keep outputs stable.
// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t& state);

/// Derive an independent stream seed from (base, index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform01();
    double uniform(double lo, double hi);
    /// log-uniform over [lo, hi], lo > 0.
    double log_uniform(double lo, double hi);
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

private:
    std::array<std::uint64_t, 4> s_;  // xoshiro256++
};

/// Seeded Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng);

// ---------------------------------------------------------------------------
// Little-endian binary I/O (64-bit doubles, 32/64-bit ints).
// ---------------------------------------------------------------------------

void write_f64(std::ostream& os, double v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64_array(std::ostream& os, std::span<const double> v);

double read_f64(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
void read_f64_array(std::istream& is, std::span<double> v);

/// CRC-32 (IEEE 802.3 polynomial) over raw bytes.
std::uint32_t crc32(const void* data, std::size_t n, std::uint32_t seed = 0);
std::uint32_t crc32_f64(std::span<const double> v);

// ---------------------------------------------------------------------------
// Minimal worker pool: runs jobs 0..n-1 on up to `workers` threads.
// Job outputs must depend only on the job index for determinism.
// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job);

}  // namespace usmnet
