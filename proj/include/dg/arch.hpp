#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "dg/tensor.hpp"

namespace dg {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
namespace tok {
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kSepUser = 258;
inline constexpr int kSepAsst = 259;
inline constexpr int kVocab = 260;
} // namespace tok

struct ArchConfig {
    int vocab_size = tok::kVocab;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq = 256;

    int head_dim() const { return d_model / n_heads; }

    /// Throws InputError unless every field is >= 1 and d_model % n_heads == 0.
    void validate() const;

    friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

/// Tensor names used by the toy model.
namespace pname {
inline constexpr const char* kTokEmb = "tok_emb";
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kUnembed = "unembed";
std::string layer(int l, const char* what);
} // namespace pname

struct ParamSpec {
    std::string name;
    Shape shape;
    /// True for the per-layer projection matrices that get sign-compressed.
    bool compressible = false;
};

/// Full parameter layout in canonical order.
std::vector<ParamSpec> param_layout(const ArchConfig& arch);
std::size_t param_count(const ArchConfig& arch);

} // namespace dg
