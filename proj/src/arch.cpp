#include "dg/arch.hpp"

#include "dg/error.hpp"

namespace dg {

void ArchConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq < 1)
        throw InputError("arch: all fields must be >= 1");
    if (d_model % n_heads != 0) throw InputError("arch: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw InputError("arch: head_dim must be even for rotary embeddings");
    if (vocab_size < tok::kVocab) throw InputError("arch: vocab_size must cover bytes and specials (260)");
}

void to_json(nlohmann::json& j, const ArchConfig& a) {
    j = nlohmann::json{{"vocab_size", a.vocab_size}, {"d_model", a.d_model}, {"n_layers", a.n_layers},
                       {"n_heads", a.n_heads},       {"d_ff", a.d_ff},       {"max_seq", a.max_seq}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
    for (const char* key : {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"})
        if (!j.contains(key)) throw InputError(std::string("arch: missing key '") + key + "'");
    j.at("vocab_size").get_to(a.vocab_size);
    j.at("d_model").get_to(a.d_model);
    j.at("n_layers").get_to(a.n_layers);
    j.at("n_heads").get_to(a.n_heads);
    j.at("d_ff").get_to(a.d_ff);
    j.at("max_seq").get_to(a.max_seq);
}

std::string pname::layer(int l, const char* what) { return "layers." + std::to_string(l) + "." + what; }

std::vector<ParamSpec> param_layout(const ArchConfig& arch) {
    arch.validate();
    auto d = static_cast<std::size_t>(arch.d_model);
    auto ff = static_cast<std::size_t>(arch.d_ff);
    auto v = static_cast<std::size_t>(arch.vocab_size);
    std::vector<ParamSpec> out;
    out.push_back({pname::kTokEmb, {v, d}, false});
    for (int l = 0; l < arch.n_layers; ++l) {
        out.push_back({pname::layer(l, "attn_norm"), {d}, false});
        for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back({pname::layer(l, w), {d, d}, true});
        out.push_back({pname::layer(l, "mlp_norm"), {d}, false});
        out.push_back({pname::layer(l, "w1"), {ff, d}, true});
        out.push_back({pname::layer(l, "w2"), {d, ff}, true});
    }
    out.push_back({pname::kFinalNorm, {d}, false});
    out.push_back({pname::kUnembed, {v, d}, false});
    return out;
}

std::size_t param_count(const ArchConfig& arch) {
    std::size_t n = 0;
    for (const auto& p : param_layout(arch)) n += shape_numel(p.shape);
    return n;
}

} // namespace dg
