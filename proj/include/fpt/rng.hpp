#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fpt {

/// Seeded pseudo-random stream. Child streams derived with split() are
/// independent of the parent's consumption, so components can draw in any
/// order without perturbing each other.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }

    Rng split(std::string_view tag) const;
    Rng split(std::uint64_t index) const;

    float normal(float mean = 0.0f, float stddev = 1.0f);
    double uniform();
    float uniform(float lo, float hi);
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p);

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(std::string_view s);

}  // namespace fpt
