// Compiled with -mavx2 -mfma; only reached when CPUID reports both.
#include <immintrin.h>

#include "dg/kernels.hpp"

namespace dg::simd::detail {

namespace {

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehdup_ps(lo);
    __m128 s = _mm_add_ps(lo, sh);
    sh = _mm_movehl_ps(sh, s);
    s = _mm_add_ss(s, sh);
    return _mm_cvtss_f32(s);
}

// Lane i of the result is all-ones iff bit i of `byte` is set.
inline __m256 byte_mask(std::uint32_t byte) {
    const __m256i sel = _mm256_setr_epi32(1, 2, 4, 8, 16, 32, 64, 128);
    __m256i b = _mm256_and_si256(_mm256_set1_epi32(static_cast<int>(byte)), sel);
    return _mm256_castsi256_ps(_mm256_cmpeq_epi32(b, sel));
}

float dot(const float* a, const float* b, std::size_t n) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
    }
    for (; i + 8 <= n; i += 8) acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    float s = hsum(_mm256_add_ps(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

float masked_sum(const float* x, const std::uint64_t* words, std::size_t m) {
    __m256 acc0 = _mm256_setzero_ps();
    __m256 acc1 = _mm256_setzero_ps();
    std::size_t full = m / 8; // whole 8-column groups
    std::size_t g = 0;
    for (; g + 2 <= full; g += 2) {
        std::uint64_t w = words[g >> 3];
        auto b0 = static_cast<std::uint32_t>((w >> ((g & 7) * 8)) & 0xFF);
        auto b1 = static_cast<std::uint32_t>((w >> (((g + 1) & 7) * 8)) & 0xFF);
        acc0 = _mm256_add_ps(acc0, _mm256_and_ps(_mm256_loadu_ps(x + g * 8), byte_mask(b0)));
        acc1 = _mm256_add_ps(acc1, _mm256_and_ps(_mm256_loadu_ps(x + g * 8 + 8), byte_mask(b1)));
    }
    for (; g < full; ++g) {
        auto b = static_cast<std::uint32_t>((words[g >> 3] >> ((g & 7) * 8)) & 0xFF);
        acc0 = _mm256_add_ps(acc0, _mm256_and_ps(_mm256_loadu_ps(x + g * 8), byte_mask(b)));
    }
    float s = hsum(_mm256_add_ps(acc0, acc1));
    for (std::size_t j = full * 8; j < m; ++j) s += x[j] * static_cast<float>((words[j >> 6] >> (j & 63)) & 1u);
    return s;
}

void signed_axpy(float alpha, const std::uint64_t* words, float* y, std::size_t m) {
    __m256 pos = _mm256_set1_ps(alpha);
    __m256 neg = _mm256_set1_ps(-alpha);
    std::size_t full = m / 8;
    for (std::size_t g = 0; g < full; ++g) {
        auto b = static_cast<std::uint32_t>((words[g >> 3] >> ((g & 7) * 8)) & 0xFF);
        __m256 add = _mm256_blendv_ps(neg, pos, byte_mask(b));
        _mm256_storeu_ps(y + g * 8, _mm256_add_ps(_mm256_loadu_ps(y + g * 8), add));
    }
    for (std::size_t j = full * 8; j < m; ++j) y[j] += ((words[j >> 6] >> (j & 63)) & 1u) ? alpha : -alpha;
}

} // namespace

const KernelTable kAvx2Table{Isa::Avx2, dot, axpy, masked_sum, signed_axpy};

} // namespace dg::simd::detail
