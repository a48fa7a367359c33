#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace rectflow {

/// Identifies one reproducible random stream. Identical (seed, stream) pairs
/// replay bit-exactly; distinct stream ids give statistically independent
/// streams, so parallel replicates just bump the stream.
struct RngSpec {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    RngSpec with_stream(std::uint64_t s) const { return {seed, s}; }
};

/// Counter-based Philox4x32-10 generator.
///
/// The 64-bit seed forms the key and the 64-bit stream id occupies the upper
/// counter words, so every (seed, stream) pair indexes a disjoint 2^64-block
/// slice of the Philox sequence.
class Philox {
  public:
    explicit Philox(RngSpec spec) : spec_(spec) {}

    std::uint32_t next_u32() {
        if (pos_ == 4) {
            block_ = generate(block_index_++);
            pos_ = 0;
        }
        return block_[pos_++];
    }

    std::uint64_t next_u64() {
        std::uint64_t lo = next_u32();
        std::uint64_t hi = next_u32();
        return (hi << 32) | lo;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform double in [a, b).
    double uniform(double a, double b) { return a + (b - a) * uniform01(); }

    /// Standard normal via the polar method; the spare deviate is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform01() - 1.0;
            v = 2.0 * uniform01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

  private:
    using Block = std::array<std::uint32_t, 4>;

    static std::uint32_t mulhi(std::uint32_t a, std::uint32_t b) {
        return static_cast<std::uint32_t>(
            (static_cast<std::uint64_t>(a) * b) >> 32);
    }

    Block generate(std::uint64_t index) const {
        std::uint32_t c0 = static_cast<std::uint32_t>(index);
        std::uint32_t c1 = static_cast<std::uint32_t>(index >> 32);
        std::uint32_t c2 = static_cast<std::uint32_t>(spec_.stream);
        std::uint32_t c3 = static_cast<std::uint32_t>(spec_.stream >> 32);
        std::uint32_t k0 = static_cast<std::uint32_t>(spec_.seed);
        std::uint32_t k1 = static_cast<std::uint32_t>(spec_.seed >> 32);
        for (int round = 0; round < 10; ++round) {
            const std::uint32_t hi0 = mulhi(0xD2511F53u, c0);
            const std::uint32_t lo0 = 0xD2511F53u * c0;
            const std::uint32_t hi1 = mulhi(0xCD9E8D57u, c2);
            const std::uint32_t lo1 = 0xCD9E8D57u * c2;
            c0 = hi1 ^ c1 ^ k0;
            c1 = lo1;
            c2 = hi0 ^ c3 ^ k1;
            c3 = lo0;
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return {c0, c1, c2, c3};
    }

    RngSpec spec_;
    std::uint64_t block_index_ = 0;
    Block block_{};
    int pos_ = 4;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace rectflow
