#include "fpt/rng.hpp"

namespace fpt {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::string_view tag) const { return Rng(splitmix64(seed_ ^ fnv1a(tag))); }

Rng Rng::split(std::uint64_t index) const { return Rng(splitmix64(splitmix64(seed_) + index)); }

float Rng::normal(float mean, float stddev) {
    if (!(stddev > 0.0f)) {
        return mean;
    }
    std::normal_distribution<float> dist(mean, stddev);
    return dist(engine_);
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

float Rng::uniform(float lo, float hi) { return std::uniform_real_distribution<float>(lo, hi)(engine_); }

std::uint64_t Rng::below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

bool Rng::bernoulli(double p) { return uniform() < p; }

}  // namespace fpt
