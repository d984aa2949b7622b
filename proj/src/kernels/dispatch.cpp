#include <atomic>

#include "dg/error.hpp"
#include "dg/kernels.hpp"

namespace dg::simd {

namespace {

bool cpu_supports(Isa isa) {
#if defined(__x86_64__) || defined(__i386__)
    switch (isa) {
    case Isa::Scalar: return true;
    case Isa::Avx2: return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    case Isa::Avx512: return __builtin_cpu_supports("avx512f");
    }
    return false;
#else
    return isa == Isa::Scalar;
#endif
}

const KernelTable* compiled_table(Isa isa) {
    switch (isa) {
    case Isa::Scalar: return &detail::kScalarTable;
#if defined(DG_HAVE_AVX2)
    case Isa::Avx2: return &detail::kAvx2Table;
#endif
#if defined(DG_HAVE_AVX512)
    case Isa::Avx512: return &detail::kAvx512Table;
#endif
    default: return nullptr;
    }
}

const KernelTable* best_table() {
    auto isas = available_isas();
    return table_for(isas.back());
}

std::atomic<const KernelTable*> g_active{nullptr};

} // namespace

std::string_view isa_name(Isa isa) {
    switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Avx512: return "avx512";
    }
    return "unknown";
}

std::optional<Isa> parse_isa(std::string_view name) {
    for (Isa isa : {Isa::Scalar, Isa::Avx2, Isa::Avx512})
        if (isa_name(isa) == name) return isa;
    return std::nullopt;
}

std::vector<Isa> available_isas() {
    std::vector<Isa> out;
    for (Isa isa : {Isa::Scalar, Isa::Avx2, Isa::Avx512})
        if (compiled_table(isa) && cpu_supports(isa)) out.push_back(isa);
    return out;
}

const KernelTable* table_for(Isa isa) { return cpu_supports(isa) ? compiled_table(isa) : nullptr; }

const KernelTable& active() {
    auto* t = g_active.load(std::memory_order_acquire);
    if (!t) {
        t = best_table();
        g_active.store(t, std::memory_order_release);
    }
    return *t;
}

void set_active(Isa isa) {
    auto* t = table_for(isa);
    if (!t) throw InputError("ISA '" + std::string(isa_name(isa)) + "' is not available on this machine");
    g_active.store(t, std::memory_order_release);
}

} // namespace dg::simd
