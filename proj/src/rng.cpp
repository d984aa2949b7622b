#include "dg/rng.hpp"

#include <cmath>
#include <numbers>

#include "dg/error.hpp"

namespace dg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

} // namespace

std::uint64_t Rng::next_u64() noexcept {
    // Mix the seed first so nearby seeds give unrelated streams.
    auto key = splitmix64(seed_);
    return splitmix64(key + 0x9E3779B97F4A7C15ull * ++counter_);
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) noexcept {
    // Rejection sampling removes modulo bias.
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return r % n;
}

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
}

Tensor rng_normal(Rng& rng, const Shape& shape, float std) {
    if (!(std > 0.0f)) throw InputError("rng_normal: std must be > 0");
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<float>(rng.normal() * std);
    return t;
}

} // namespace dg
