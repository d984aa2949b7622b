#pragma once

// Linear layers whose weight is W_base + sum_k gamma_k * S_k, evaluated
// without materialising the merged matrix. For a real-valued activation x and
// a sign row s, x . s = 2 * (sum of x over positive bits) - sum(x), so each
// plane costs one masked accumulation per output row.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dg/packed_sign.hpp"
#include "dg/tensor.hpp"

namespace dg {

/// out[i] = sum_j x[j] * s_ij. x.size() must equal S.cols().
Tensor signed_matvec(std::span<const float> x, const PackedSignMatrix& signs);

/// y[batch, n] = x[batch, m] * base^T (dense rows of length m). y is overwritten.
void dense_linear(const float* x, std::size_t batch, std::size_t m, const float* base, std::size_t n, float* y);

/// y[batch, n] += sum_k gamma_k * x * S_k^T.
void add_sign_planes(const float* x, std::size_t batch, std::size_t m, std::span<const ScaledSigns> planes,
                     std::size_t n, float* y);

/// x[batch, m] * (base + sum_k gamma_k S_k)^T without forming the merged weight.
Tensor fused_linear(const Tensor& x, const Tensor& base, std::span<const ScaledSigns> planes);

struct BenchRow {
    std::size_t n = 0;
    std::size_t m = 0;
    int bits = 0;
    std::string variant; // "fused" or "dense"
    double ns_per_call = 0.0;
    double checksum = 0.0;
    std::size_t bytes_touched = 0;
};

struct BenchSize {
    std::size_t n;
    std::size_t m;
};

/// Times fused vs dense-merged linear for each size. Each size is first
/// checked against the dense oracle; a mismatch throws before any timing.
std::vector<BenchRow> bench_fused(std::span<const BenchSize> sizes, int bits, int repetitions, std::uint64_t seed);

/// CSV with columns size_n,size_m,bits,variant,ns_per_call,checksum.
void write_bench_csv(std::span<const BenchRow> rows, std::ostream& out);

/// Bytes read per call: n*m*b/8 for the planes plus n*m*4 for the base weights.
std::size_t fused_bytes_touched(std::size_t n, std::size_t m, int bits);
/// Bytes read per call when serving two dense f32 models.
std::size_t dense_pair_bytes_touched(std::size_t n, std::size_t m);

} // namespace dg
