#include "dg/delta.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include "dg/binio.hpp"
#include "dg/error.hpp"
#include "dg/kernels.hpp"

namespace dg {

namespace {

constexpr const char* kMagic = "DGDL";
constexpr std::uint32_t kVersion = 1;
constexpr const char* kCorrupt = "corrupt delta file";

Tensor subtract(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

} // namespace

PackedSignMatrix sign(const Tensor& delta) {
    if (delta.rank() != 2) throw InputError("sign: expected a 2-D tensor");
    return PackedSignMatrix::pack(delta);
}

float gamma_init(const Tensor& delta) {
    if (delta.rank() != 2) throw InputError("gamma_init: expected a 2-D tensor");
    double s = 0.0;
    for (float v : delta.data()) s += std::abs(static_cast<double>(v));
    return static_cast<float>(s / static_cast<double>(delta.numel()));
}

std::vector<ScaledSigns> compress_matrix(const Tensor& delta, int bits) {
    if (bits < 1) throw InputError("compress: bits must be >= 1");
    std::vector<ScaledSigns> planes;
    Tensor residual = delta;
    const std::size_t n = delta.dim(0), m = delta.dim(1);
    for (int k = 0; k < bits; ++k) {
        ScaledSigns p{gamma_init(residual), sign(residual)};
        const auto& kt = simd::active();
        for (std::size_t i = 0; i < n; ++i) kt.signed_axpy(-p.scale, p.signs.row_words(i), residual.ptr() + i * m, m);
        planes.push_back(std::move(p));
    }
    return planes;
}

Tensor expand_planes(std::span<const ScaledSigns> planes) {
    if (planes.empty()) throw InputError("expand_planes: no planes");
    const std::size_t n = planes[0].signs.rows(), m = planes[0].signs.cols();
    Tensor out({n, m});
    const auto& kt = simd::active();
    for (const auto& p : planes)
        for (std::size_t i = 0; i < n; ++i) kt.signed_axpy(p.scale, p.signs.row_words(i), out.ptr() + i * m, m);
    return out;
}

CompressedDelta compress(const Checkpoint& base, const Checkpoint& finetuned, int bits) {
    if (bits < 1) throw InputError("compress: bits must be >= 1");
    require_compatible(base, finetuned);
    CompressedDelta cd;
    cd.arch = base.arch;
    cd.bits = bits;
    for (const auto& spec : param_layout(base.arch)) {
        Tensor delta = subtract(finetuned.at(spec.name), base.at(spec.name));
        if (spec.compressible)
            cd.entries.emplace(spec.name, compress_matrix(delta, bits));
        else
            cd.passthrough.emplace(spec.name, std::move(delta));
    }
    return cd;
}

void require_compatible(const Checkpoint& base, const CompressedDelta& cd) {
    if (!(base.arch == cd.arch)) throw MismatchError("checkpoint mismatch: delta architecture differs from base");
    if (cd.entries.size() + cd.passthrough.size() != base.tensors.size())
        throw MismatchError("checkpoint mismatch: delta covers a different parameter set");
    for (const auto& [name, planes] : cd.entries) {
        const auto& w = base.at(name);
        for (const auto& p : planes)
            if (w.rank() != 2 || p.signs.rows() != w.dim(0) || p.signs.cols() != w.dim(1))
                throw MismatchError("checkpoint mismatch: sign plane shape differs for '" + name + "'");
    }
    for (const auto& [name, t] : cd.passthrough)
        if (base.at(name).shape() != t.shape())
            throw MismatchError("checkpoint mismatch: passthrough shape differs for '" + name + "'");
}

Checkpoint reconstruct(const Checkpoint& base, const CompressedDelta& cd) {
    require_compatible(base, cd);
    Checkpoint out = base;
    const auto& kt = simd::active();
    for (const auto& [name, planes] : cd.entries) {
        auto& w = out.at(name);
        const std::size_t n = w.dim(0), m = w.dim(1);
        for (const auto& p : planes)
            for (std::size_t i = 0; i < n; ++i) kt.signed_axpy(p.scale, p.signs.row_words(i), w.ptr() + i * m, m);
    }
    for (const auto& [name, delta] : cd.passthrough) {
        auto& w = out.at(name);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] += delta[i];
    }
    return out;
}

ModelView fused_view(const Checkpoint& base, const CompressedDelta& cd) {
    require_compatible(base, cd);
    struct Owned {
        TensorMap merged;
        std::map<std::string, std::vector<ScaledSigns>> planes;
    };
    auto owned = std::make_shared<Owned>();
    owned->planes = cd.entries;
    for (const auto& [name, delta] : cd.passthrough) {
        Tensor w = base.at(name);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] += delta[i];
        owned->merged.emplace(name, std::move(w));
    }

    ModelView view = ModelView::of(base);
    auto ptr = [&](const std::string& name) { return owned->merged.at(name).ptr(); };
    view.tok_emb = ptr(pname::kTokEmb);
    view.final_norm = ptr(pname::kFinalNorm);
    view.unembed = ptr(pname::kUnembed);
    for (int l = 0; l < base.arch.n_layers; ++l) {
        auto& L = view.layers[static_cast<std::size_t>(l)];
        L.attn_norm = ptr(pname::layer(l, "attn_norm"));
        L.mlp_norm = ptr(pname::layer(l, "mlp_norm"));
        std::pair<LinearRef*, const char*> linears[] = {{&L.wq, "wq"}, {&L.wk, "wk"}, {&L.wv, "wv"},
                                                        {&L.wo, "wo"}, {&L.w1, "w1"}, {&L.w2, "w2"}};
        for (auto [ref, w] : linears) ref->planes = owned->planes.at(pname::layer(l, w));
    }
    view.keepalive = owned;
    return view;
}

void save_delta(const CompressedDelta& cd, const std::filesystem::path& path) {
    binio::Writer payload;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, planes] : cd.entries) {
        nlohmann::json scales = nlohmann::json::array(), offsets = nlohmann::json::array();
        std::size_t n = planes.empty() ? 0 : planes[0].signs.rows();
        std::size_t m = planes.empty() ? 0 : planes[0].signs.cols();
        for (const auto& p : planes) {
            scales.push_back(p.scale);
            offsets.push_back(payload.size());
            payload.bytes(p.signs.words().data(), p.signs.words().size() * sizeof(std::uint64_t));
        }
        entries.push_back({{"name", name}, {"n", n}, {"m", m}, {"scales", scales}, {"sign_offsets", offsets}});
    }
    nlohmann::json passthrough = nlohmann::json::array();
    for (const auto& [name, t] : cd.passthrough) {
        std::size_t bytes = t.numel() * sizeof(float);
        passthrough.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}, {"length", bytes}});
        payload.bytes(t.ptr(), bytes);
    }
    nlohmann::json header{{"arch", cd.arch}, {"bits", cd.bits}, {"entries", entries}, {"passthrough", passthrough}};
    binio::write_container(path, kMagic, kVersion, header, payload.buffer());
}

CompressedDelta load_delta(const std::filesystem::path& path) {
    auto c = binio::read_container(path, kMagic, kVersion, kCorrupt);
    auto fail = [](const std::string& what) { return FormatError(std::string(kCorrupt) + ": " + what); };
    CompressedDelta cd;
    try {
        cd.arch = c.header.at("arch").get<ArchConfig>();
        cd.bits = c.header.at("bits").get<int>();
        if (cd.bits < 1) throw fail("bits must be >= 1");
        for (const auto& e : c.header.at("entries")) {
            auto name = e.at("name").get<std::string>();
            auto n = e.at("n").get<std::size_t>();
            auto m = e.at("m").get<std::size_t>();
            auto scales = e.at("scales").get<std::vector<float>>();
            auto offsets = e.at("sign_offsets").get<std::vector<std::size_t>>();
            if (scales.size() != offsets.size() || scales.size() != static_cast<std::size_t>(cd.bits))
                throw fail("entry '" + name + "' has inconsistent plane count");
            std::size_t words = n * PackedSignMatrix::words_for(m);
            std::size_t bytes = words * sizeof(std::uint64_t);
            std::vector<ScaledSigns> planes;
            for (std::size_t k = 0; k < scales.size(); ++k) {
                if (offsets[k] > c.payload.size() || bytes > c.payload.size() - offsets[k])
                    throw fail("sign plane offset out of range for '" + name + "'");
                std::vector<std::uint64_t> w(words);
                std::memcpy(w.data(), c.payload.data() + offsets[k], bytes);
                PackedSignMatrix signs(n, m, std::move(w));
                if (!signs.padding_clear()) throw fail("padding bits set in '" + name + "'");
                planes.push_back({scales[k], std::move(signs)});
            }
            cd.entries.emplace(name, std::move(planes));
        }
        for (const auto& e : c.header.at("passthrough")) {
            auto name = e.at("name").get<std::string>();
            auto shape = e.at("shape").get<Shape>();
            auto offset = e.at("offset").get<std::size_t>();
            auto length = e.at("length").get<std::size_t>();
            std::size_t numel = shape.empty() ? 0 : shape_numel(shape);
            if (shape.empty() || length != numel * sizeof(float)) throw fail("passthrough '" + name + "' length mismatch");
            if (offset > c.payload.size() || length > c.payload.size() - offset)
                throw fail("passthrough offset out of range for '" + name + "'");
            std::vector<float> values(numel);
            std::memcpy(values.data(), c.payload.data() + offset, length);
            cd.passthrough.emplace(name, Tensor(std::move(shape), std::move(values)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(e.what());
    } catch (const InputError& e) {
        throw fail(e.what());
    }
    return cd;
}

Footprint footprint(const CompressedDelta& cd) {
    Footprint f;
    std::size_t params = 0;
    for (const auto& [name, planes] : cd.entries) {
        if (planes.empty()) continue;
        std::size_t n = planes[0].signs.rows(), m = planes[0].signs.cols();
        params += n * m;
        f.delta_bytes += planes.size() * (n * PackedSignMatrix::words_for(m) * 8 + 4);
    }
    for (const auto& [name, t] : cd.passthrough) {
        params += t.numel();
        f.delta_bytes += t.numel() * 4;
    }
    f.dense_bytes = params * 4;
    f.ratio = f.dense_bytes ? static_cast<double>(f.delta_bytes) / static_cast<double>(f.dense_bytes) : 0.0;
    return f;
}

} // namespace dg
