#pragma once

// Sign compression of fine-tuning deltas. A weight matrix's delta
// W_f - W_b is replaced by b scaled sign planes found by repeatedly taking
// the sign of the current residual and its mean absolute value.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dg/checkpoint.hpp"
#include "dg/model.hpp"
#include "dg/packed_sign.hpp"

namespace dg {

struct CompressedDelta {
    ArchConfig arch;
    int bits = 1;
    /// Sign-compressed matrices: one (scale, signs) pair per iteration.
    std::map<std::string, std::vector<ScaledSigns>> entries;
    /// Full-precision deltas for everything that is not sign-compressed.
    TensorMap passthrough;

    friend bool operator==(const CompressedDelta&, const CompressedDelta&) = default;
};

/// Bit set where delta >= 0 (zero counts as positive).
PackedSignMatrix sign(const Tensor& delta);

/// Mean absolute value: the least-squares scale for sign(delta).
float gamma_init(const Tensor& delta);

/// b residual iterations on one matrix.
std::vector<ScaledSigns> compress_matrix(const Tensor& delta, int bits);

/// sum_k gamma_k * S_k as a dense [n, m] tensor.
Tensor expand_planes(std::span<const ScaledSigns> planes);

CompressedDelta compress(const Checkpoint& base, const Checkpoint& finetuned, int bits);

/// Dense W_b + sum_k gamma_k S_k (matrices) and W_b + delta (passthrough).
Checkpoint reconstruct(const Checkpoint& base, const CompressedDelta& cd);

/// Inference view that applies sign planes through the fused binary kernel.
/// `base` must outlive the view; the delta is copied into it.
ModelView fused_view(const Checkpoint& base, const CompressedDelta& cd);

/// Throws MismatchError unless cd covers exactly base's parameters.
void require_compatible(const Checkpoint& base, const CompressedDelta& cd);

// "DGDL" | u32 version | u64 header length | JSON header | u64 sign words | f32 passthrough payloads.
void save_delta(const CompressedDelta& cd, const std::filesystem::path& path);
CompressedDelta load_delta(const std::filesystem::path& path);

struct Footprint {
    std::size_t delta_bytes = 0;
    std::size_t dense_bytes = 0;
    double ratio = 0.0;
};

/// Storage for the compressed delta vs the dense f32 model it encodes.
Footprint footprint(const CompressedDelta& cd);

} // namespace dg
