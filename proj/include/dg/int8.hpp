#pragma once

// Symmetric per-tensor int8 weight quantization: scale = max|W| / 127,
// q = clamp(round(W / scale), -127, 127). Every tensor is quantized,
// including embeddings and norm gains.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dg/checkpoint.hpp"

namespace dg {

struct Int8Tensor {
    Shape shape;
    float scale = 0.0f;
    std::vector<std::int8_t> q;

    friend bool operator==(const Int8Tensor&, const Int8Tensor&) = default;
};

struct Int8Model {
    ArchConfig arch;
    std::map<std::string, Int8Tensor> tensors;

    friend bool operator==(const Int8Model&, const Int8Model&) = default;
};

Int8Tensor quantize_tensor(const Tensor& w);
Tensor dequantize_tensor(const Int8Tensor& q);

Int8Model quantize(const Checkpoint& ckpt);
Checkpoint dequantize(const Int8Model& model);

// "DGI8" | u32 version | u64 header length | JSON header | int8 codes | f32 scales.
void save_int8(const Int8Model& model, const std::filesystem::path& path);
Int8Model load_int8(const std::filesystem::path& path);

} // namespace dg
