#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dg/arch.hpp"
#include "dg/tensor.hpp"

namespace dg {

using TensorMap = std::map<std::string, Tensor>;

struct Checkpoint {
    ArchConfig arch;
    TensorMap tensors;
    std::map<std::string, std::string> meta;

    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    /// Throws MismatchError if names or shapes disagree with `param_layout(arch)`.
    void check_layout() const;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Bitwise equality of arch, meta and every tensor payload.
bool bit_equal(const Checkpoint& a, const Checkpoint& b);

/// Same arch and same tensor names/shapes; throws MismatchError naming the first difference.
void require_compatible(const Checkpoint& a, const Checkpoint& b);

// "DGCK" | u32 version | u64 header length | JSON header | f32 payloads (little-endian).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace dg
