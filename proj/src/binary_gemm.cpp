#include "dg/binary_gemm.hpp"

#include <chrono>
#include <cmath>
#include <ostream>

#include "dg/error.hpp"
#include "dg/kernels.hpp"
#include "dg/rng.hpp"

namespace dg {

namespace {

float row_sum(const float* x, std::size_t m) {
    float s = 0.0f;
    for (std::size_t j = 0; j < m; ++j) s += x[j];
    return s;
}

void check_plane_dims(std::span<const ScaledSigns> planes, std::size_t n, std::size_t m) {
    for (const auto& p : planes)
        if (p.signs.rows() != n || p.signs.cols() != m)
            throw InputError("fused_linear: sign plane is " + std::to_string(p.signs.rows()) + "x" +
                             std::to_string(p.signs.cols()) + ", expected " + std::to_string(n) + "x" +
                             std::to_string(m));
}

} // namespace

Tensor signed_matvec(std::span<const float> x, const PackedSignMatrix& signs) {
    if (x.size() != signs.cols())
        throw InputError("signed_matvec: x has " + std::to_string(x.size()) + " entries, matrix has " +
                         std::to_string(signs.cols()) + " columns");
    const auto& k = simd::active();
    float total = row_sum(x.data(), x.size());
    Tensor out({signs.rows()});
    for (std::size_t i = 0; i < signs.rows(); ++i)
        out[i] = 2.0f * k.masked_sum(x.data(), signs.row_words(i), signs.cols()) - total;
    return out;
}

void dense_linear(const float* x, std::size_t batch, std::size_t m, const float* base, std::size_t n, float* y) {
    const auto& k = simd::active();
    for (std::size_t b = 0; b < batch; ++b) {
        const float* xr = x + b * m;
        float* yr = y + b * n;
        for (std::size_t i = 0; i < n; ++i) yr[i] = k.dot(xr, base + i * m, m);
    }
}

void add_sign_planes(const float* x, std::size_t batch, std::size_t m, std::span<const ScaledSigns> planes,
                     std::size_t n, float* y) {
    if (planes.empty()) return;
    check_plane_dims(planes, n, m);
    const auto& k = simd::active();
    for (std::size_t b = 0; b < batch; ++b) {
        const float* xr = x + b * m;
        float* yr = y + b * n;
        float total = row_sum(xr, m);
        for (const auto& p : planes) {
            if (p.scale == 0.0f) continue;
            for (std::size_t i = 0; i < n; ++i)
                yr[i] += p.scale * (2.0f * k.masked_sum(xr, p.signs.row_words(i), m) - total);
        }
    }
}

Tensor fused_linear(const Tensor& x, const Tensor& base, std::span<const ScaledSigns> planes) {
    if (x.rank() != 2 || base.rank() != 2 || x.dim(1) != base.dim(1))
        throw InputError("fused_linear: expected x[batch,m] and base[n,m]");
    std::size_t batch = x.dim(0), m = x.dim(1), n = base.dim(0);
    check_plane_dims(planes, n, m);
    Tensor y({batch, n});
    dense_linear(x.ptr(), batch, m, base.ptr(), n, y.ptr());
    add_sign_planes(x.ptr(), batch, m, planes, n, y.ptr());
    return y;
}

std::size_t fused_bytes_touched(std::size_t n, std::size_t m, int bits) {
    return n * m * static_cast<std::size_t>(bits) / 8 + n * m * 4;
}

std::size_t dense_pair_bytes_touched(std::size_t n, std::size_t m) { return 2 * n * m * 4; }

std::vector<BenchRow> bench_fused(std::span<const BenchSize> sizes, int bits, int repetitions, std::uint64_t seed) {
    if (bits < 1 || repetitions < 1) throw InputError("bench_fused: bits and repetitions must be >= 1");
    using clock = std::chrono::steady_clock;
    Rng rng(seed);
    std::vector<BenchRow> rows;
    for (auto [n, m] : sizes) {
        Tensor base = rng_normal(rng, {n, m}, 0.02f);
        Tensor x = rng_normal(rng, {1, m}, 1.0f);
        std::vector<ScaledSigns> planes;
        Tensor merged = base;
        for (int k = 0; k < bits; ++k) {
            Tensor s = rng_normal(rng, {n, m}, 1.0f);
            ScaledSigns p{0.001f / static_cast<float>(1 << k), PackedSignMatrix::pack(s)};
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) merged[i * m + j] += p.scale * p.signs.sign(i, j);
            planes.push_back(std::move(p));
        }

        Tensor fused = fused_linear(x, base, planes);
        Tensor dense({1, n});
        dense_linear(x.ptr(), 1, m, merged.ptr(), n, dense.ptr());
        for (std::size_t i = 0; i < n; ++i) {
            float tol = std::max(1e-4f * std::abs(dense[i]), 1e-4f);
            if (std::abs(fused[i] - dense[i]) > tol)
                throw std::runtime_error("bench_fused: equivalence gate failed at size " + std::to_string(n) + "x" +
                                         std::to_string(m));
        }

        auto time_it = [&](auto&& fn) {
            double checksum = 0.0;
            auto t0 = clock::now();
            for (int r = 0; r < repetitions; ++r) checksum += fn();
            auto t1 = clock::now();
            double ns = std::chrono::duration<double, std::nano>(t1 - t0).count() / repetitions;
            return std::pair{ns, checksum / repetitions};
        };
        Tensor y({1, n});
        auto [fns, fsum] = time_it([&] {
            dense_linear(x.ptr(), 1, m, base.ptr(), n, y.ptr());
            add_sign_planes(x.ptr(), 1, m, planes, n, y.ptr());
            return static_cast<double>(y[0]);
        });
        auto [dns, dsum] = time_it([&] {
            dense_linear(x.ptr(), 1, m, merged.ptr(), n, y.ptr());
            return static_cast<double>(y[0]);
        });
        rows.push_back({n, m, bits, "fused", fns, fsum, fused_bytes_touched(n, m, bits)});
        rows.push_back({n, m, bits, "dense", dns, dsum, dense_pair_bytes_touched(n, m)});
    }
    return rows;
}

void write_bench_csv(std::span<const BenchRow> rows, std::ostream& out) {
    out << "size_n,size_m,bits,variant,ns_per_call,checksum\n";
    for (const auto& r : rows)
        out << r.n << ',' << r.m << ',' << r.bits << ',' << r.variant << ',' << r.ns_per_call << ',' << r.checksum
            << '\n';
}

} // namespace dg
