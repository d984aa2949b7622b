// Compiled with -mavx512f; only reached when CPUID reports AVX-512F.
#include <immintrin.h>

#include "dg/kernels.hpp"

namespace dg::simd::detail {

namespace {

inline __mmask16 tail_mask(std::size_t remaining) {
    return remaining >= 16 ? static_cast<__mmask16>(0xFFFF) : static_cast<__mmask16>((1u << remaining) - 1u);
}

inline __mmask16 bits16(const std::uint64_t* words, std::size_t j) {
    return static_cast<__mmask16>((words[j >> 6] >> (j & 63)) & 0xFFFF);
}

float dot(const float* a, const float* b, std::size_t n) {
    __m512 acc0 = _mm512_setzero_ps();
    __m512 acc1 = _mm512_setzero_ps();
    std::size_t i = 0;
    for (; i + 32 <= n; i += 32) {
        acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i), _mm512_loadu_ps(b + i), acc0);
        acc1 = _mm512_fmadd_ps(_mm512_loadu_ps(a + i + 16), _mm512_loadu_ps(b + i + 16), acc1);
    }
    for (; i < n; i += 16) {
        __mmask16 k = tail_mask(n - i);
        acc0 = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(k, a + i), _mm512_maskz_loadu_ps(k, b + i), acc0);
    }
    return _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1));
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    __m512 va = _mm512_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 16 <= n; i += 16)
        _mm512_storeu_ps(y + i, _mm512_fmadd_ps(va, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
    if (i < n) {
        __mmask16 k = tail_mask(n - i);
        __m512 r = _mm512_fmadd_ps(va, _mm512_maskz_loadu_ps(k, x + i), _mm512_maskz_loadu_ps(k, y + i));
        _mm512_mask_storeu_ps(y + i, k, r);
    }
}

float masked_sum(const float* x, const std::uint64_t* words, std::size_t m) {
    __m512 acc0 = _mm512_setzero_ps();
    __m512 acc1 = _mm512_setzero_ps();
    std::size_t j = 0;
    for (; j + 32 <= m; j += 32) {
        acc0 = _mm512_add_ps(acc0, _mm512_maskz_loadu_ps(bits16(words, j), x + j));
        acc1 = _mm512_add_ps(acc1, _mm512_maskz_loadu_ps(bits16(words, j + 16), x + j + 16));
    }
    for (; j < m; j += 16) {
        // Masked-off lanes are never loaded, so columns past m are untouched.
        __mmask16 k = bits16(words, j) & tail_mask(m - j);
        acc0 = _mm512_add_ps(acc0, _mm512_maskz_loadu_ps(k, x + j));
    }
    return _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1));
}

void signed_axpy(float alpha, const std::uint64_t* words, float* y, std::size_t m) {
    __m512 pos = _mm512_set1_ps(alpha);
    __m512 neg = _mm512_set1_ps(-alpha);
    for (std::size_t j = 0; j < m; j += 16) {
        __mmask16 valid = tail_mask(m - j);
        __m512 add = _mm512_mask_blend_ps(bits16(words, j), neg, pos);
        __m512 r = _mm512_add_ps(_mm512_maskz_loadu_ps(valid, y + j), add);
        _mm512_mask_storeu_ps(y + j, valid, r);
    }
}

} // namespace

const KernelTable kAvx512Table{Isa::Avx512, dot, axpy, masked_sum, signed_axpy};

} // namespace dg::simd::detail
