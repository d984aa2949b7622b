#pragma once

// Inner-loop arithmetic with one scalar reference implementation and SIMD
// variants picked at runtime from CPUID. Every variant must agree with the
// scalar table up to f32 accumulation-order differences.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace dg::simd {

enum class Isa { Scalar, Avx2, Avx512 };

std::string_view isa_name(Isa isa);
std::optional<Isa> parse_isa(std::string_view name);

struct KernelTable {
    Isa isa;
    float (*dot)(const float* a, const float* b, std::size_t n);
    /// y += alpha * x
    void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
    /// Sum of x[j] over columns j < m whose bit is set in `words` (LSB-first,
    /// 64 columns per word). Bits at or beyond m are ignored.
    float (*masked_sum)(const float* x, const std::uint64_t* words, std::size_t m);
    /// y[j] += alpha for set bits, y[j] -= alpha for clear bits, j < m.
    void (*signed_axpy)(float alpha, const std::uint64_t* words, float* y, std::size_t m);
};

/// Variants compiled in and supported by the running CPU, scalar first.
std::vector<Isa> available_isas();
/// Table for `isa`, or nullptr if it is not available here.
const KernelTable* table_for(Isa isa);

/// The table used by the rest of the library. Defaults to the widest available ISA.
const KernelTable& active();
/// Pin the active table (CLI --isa, equivalence tests). Throws InputError if unavailable.
void set_active(Isa isa);

namespace detail {
extern const KernelTable kScalarTable;
#if defined(DG_HAVE_AVX2)
extern const KernelTable kAvx2Table;
#endif
#if defined(DG_HAVE_AVX512)
extern const KernelTable kAvx512Table;
#endif
} // namespace detail

} // namespace dg::simd
