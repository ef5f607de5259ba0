#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace emcomm {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Named substream of a root seed. Each consumer draws from its own stream so
// that adding draws in one place never shifts another.
inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name, std::uint64_t a) {
    return splitmix64(stream_seed(root, name) ^ splitmix64(a + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t stream_seed(std::uint64_t root, std::string_view name, std::uint64_t a,
                                 std::uint64_t b) {
    return splitmix64(stream_seed(root, name, a) ^ splitmix64(b + 0x8cb92ba72f3d8dd7ULL));
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return uniform_(engine_); }
    double normal() { return normal_(engine_); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace emcomm
