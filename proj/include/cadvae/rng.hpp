#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <vector>

namespace cadvae {

// xoroshiro128++ with splitmix64 seeding. The whole generator state is two
// 64-bit words, which is what lets checkpoints persist it in 16 bytes and
// resume bit-exactly. All stochastic behaviour in the project flows through
// this type; std::normal_distribution and friends are implementation-defined
// and are not used anywhere.
class Rng {
  public:
    Rng() : Rng(0x9e3779b97f4a7c15ull) {}

    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        s_[0] = splitmix64(x);
        s_[1] = splitmix64(x);
        if (s_[0] == 0 && s_[1] == 0) s_[1] = 1;
    }

    std::uint64_t next_u64() {
        const std::uint64_t s0 = s_[0];
        std::uint64_t s1 = s_[1];
        const std::uint64_t result = rotl(s0 + s1, 17) + s0;
        s1 ^= s0;
        s_[0] = rotl(s0, 49) ^ s1 ^ (s1 << 21);
        s_[1] = rotl(s1, 28);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in (0, 1]; safe to feed into log().
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Standard normal via Box-Muller. Deliberately cache-free: a pending
    // second draw would be hidden state the 16-byte serialization cannot hold.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double std_dev) { return mean + std_dev * normal(); }

    // Uniform integer in [0, n). Rejection sampling keeps it exactly uniform.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<std::uint32_t> permutation(std::size_t n) {
        std::vector<std::uint32_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<std::uint32_t>(i);
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::array<std::uint8_t, 16> state() const {
        std::array<std::uint8_t, 16> out{};
        std::memcpy(out.data(), &s_[0], 8);
        std::memcpy(out.data() + 8, &s_[1], 8);
        return out;
    }

    void set_state(const std::array<std::uint8_t, 16>& bytes) {
        std::memcpy(&s_[0], bytes.data(), 8);
        std::memcpy(&s_[1], bytes.data() + 8, 8);
    }

    // Independent child generator; used to split seeds across subsystems.
    Rng fork() { return Rng(next_u64()); }

  private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::uint64_t s_[2];
};

}  // namespace cadvae
