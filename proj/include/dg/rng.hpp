#pragma once

#include <cstdint>

#include "dg/tensor.hpp"

namespace dg {

/// Counter-based generator: draw i is splitmix64(seed, i). The stream depends
/// only on the seed, never on platform or library versions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() noexcept;
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;
    /// Standard normal via Box-Muller (both outputs used).
    double normal() noexcept;

    /// Child stream with a seed derived from this one; advances the parent.
    Rng split() noexcept { return Rng(next_u64()); }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Gaussian tensor with the given standard deviation; std must be > 0.
Tensor rng_normal(Rng& rng, const Shape& shape, float std);

template <typename It>
void shuffle(Rng& rng, It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
        auto j = rng.below(i);
        std::swap(first[i - 1], first[j]);
    }
}

} // namespace dg
