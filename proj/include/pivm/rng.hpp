#pragma once

// Counter-based random streams.
//
// Generator: Philox4x32-10. A stream is identified by (seed, stream id):
//   key     = { low32(seed), high32(seed) }
//   counter = { low32(n), high32(n), low32(stream), high32(stream) }
// where n is the index of the 128-bit block within the stream. Stream ids
// are derived from a parent id and a list of integer parts by repeated
// splitmix64 mixing (see StreamKey::child), so any (seed, path) pair names
// the same sequence on every platform and thread count.

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace pivm {

namespace philox {

using Counter = std::array<std::uint32_t, 4>;
using Key = std::array<std::uint32_t, 2>;

Counter block(Counter counter, Key key);

}  // namespace philox

std::uint64_t splitmix64(std::uint64_t x);

/// FNV-1a over a string, usable for compile-time stream tags.
constexpr std::uint64_t tag(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Rng {
public:
    Rng(std::uint64_t seed, std::uint64_t stream);

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller; the second value of each pair is cached.
    double normal();
    double normal(double mean, double sd) { return mean + sd * normal(); }
    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint32_t below(std::uint32_t n);

private:
    philox::Key key_;
    std::uint64_t stream_;
    std::uint64_t block_index_ = 0;
    philox::Counter buffer_{};
    int used_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Names a random stream. Children derive deterministic sub-streams.
struct StreamKey {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;

    StreamKey child(std::uint64_t part) const;
    StreamKey child(std::initializer_list<std::uint64_t> parts) const;
    Rng rng() const { return Rng(seed, stream); }

    friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

}  // namespace pivm
