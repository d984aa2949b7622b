#include "dg/kernels.hpp"

namespace dg::simd::detail {

namespace {

float dot(const float* a, const float* b, std::size_t n) {
    float s = 0.0f;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

float masked_sum(const float* x, const std::uint64_t* words, std::size_t m) {
    float s = 0.0f;
    for (std::size_t j = 0; j < m; ++j) {
        auto bit = (words[j >> 6] >> (j & 63)) & 1u;
        s += x[j] * static_cast<float>(bit);
    }
    return s;
}

void signed_axpy(float alpha, const std::uint64_t* words, float* y, std::size_t m) {
    for (std::size_t j = 0; j < m; ++j) {
        auto bit = (words[j >> 6] >> (j & 63)) & 1u;
        y[j] += bit ? alpha : -alpha;
    }
}

} // namespace

const KernelTable kScalarTable{Isa::Scalar, dot, axpy, masked_sum, signed_axpy};

} // namespace dg::simd::detail
