#include "pivm/rng.hpp"

#include <cmath>
#include <numbers>

namespace pivm {

namespace philox {

namespace {

constexpr std::uint32_t kM0 = 0xD2511F53u;
constexpr std::uint32_t kM1 = 0xCD9E8D57u;
constexpr std::uint32_t kW0 = 0x9E3779B9u;
constexpr std::uint32_t kW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& lo, std::uint32_t& hi) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    lo = static_cast<std::uint32_t>(p);
    hi = static_cast<std::uint32_t>(p >> 32);
}

}  // namespace

Counter block(Counter c, Key k) {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t lo0, hi0, lo1, hi1;
        mulhilo(kM0, c[0], lo0, hi0);
        mulhilo(kM1, c[2], lo1, hi1);
        c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
        k[0] += kW0;
        k[1] += kW1;
    }
    return c;
}

}  // namespace philox

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, stream_(stream) {}

std::uint32_t Rng::next_u32() {
    if (used_ == 4) {
        const philox::Counter ctr{static_cast<std::uint32_t>(block_index_),
                                  static_cast<std::uint32_t>(block_index_ >> 32),
                                  static_cast<std::uint32_t>(stream_),
                                  static_cast<std::uint32_t>(stream_ >> 32)};
        buffer_ = philox::block(ctr, key_);
        ++block_index_;
        used_ = 0;
    }
    return buffer_[used_++];
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint32_t Rng::below(std::uint32_t n) {
    if (n <= 1) return 0;
    const std::uint32_t limit = static_cast<std::uint32_t>((0x100000000ULL / n) * n - 1);
    for (;;) {
        const std::uint32_t r = next_u32();
        if (r <= limit) return r % n;
    }
}

StreamKey StreamKey::child(std::uint64_t part) const {
    return StreamKey{seed, splitmix64(stream ^ splitmix64(part + 0x632BE59BD9B4E019ULL))};
}

StreamKey StreamKey::child(std::initializer_list<std::uint64_t> parts) const {
    StreamKey k = *this;
    for (auto p : parts) k = k.child(p);
    return k;
}

}  // namespace pivm
