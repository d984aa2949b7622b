#include "dg/int8.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dg/binio.hpp"
#include "dg/error.hpp"

namespace dg {

namespace {
constexpr const char* kMagic = "DGI8";
constexpr std::uint32_t kVersion = 1;
constexpr const char* kCorrupt = "corrupt int8 file";
} // namespace

Int8Tensor quantize_tensor(const Tensor& w) {
    Int8Tensor out;
    out.shape = w.shape();
    float mx = 0.0f;
    for (float v : w.data()) mx = std::max(mx, std::abs(v));
    out.scale = mx > 0.0f ? mx / 127.0f : 1.0f;
    out.q.resize(w.numel());
    for (std::size_t i = 0; i < w.numel(); ++i) {
        float r = std::nearbyint(w[i] / out.scale);
        out.q[i] = static_cast<std::int8_t>(std::clamp(r, -127.0f, 127.0f));
    }
    return out;
}

Tensor dequantize_tensor(const Int8Tensor& q) {
    Tensor t(q.shape);
    for (std::size_t i = 0; i < q.q.size(); ++i) t[i] = static_cast<float>(q.q[i]) * q.scale;
    return t;
}

Int8Model quantize(const Checkpoint& ckpt) {
    Int8Model m;
    m.arch = ckpt.arch;
    for (const auto& [name, t] : ckpt.tensors) m.tensors.emplace(name, quantize_tensor(t));
    return m;
}

Checkpoint dequantize(const Int8Model& model) {
    Checkpoint c;
    c.arch = model.arch;
    for (const auto& [name, q] : model.tensors) c.tensors.emplace(name, dequantize_tensor(q));
    c.check_layout();
    return c;
}

void save_int8(const Int8Model& model, const std::filesystem::path& path) {
    binio::Writer payload;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, q] : model.tensors) {
        entries.push_back({{"name", name}, {"shape", q.shape}, {"offset", payload.size()}, {"length", q.q.size()}});
        payload.bytes(q.q.data(), q.q.size());
    }
    // f32 scales follow the codes, in table order.
    std::size_t scales_offset = payload.size();
    for (const auto& [name, q] : model.tensors) payload.pod(q.scale);
    nlohmann::json header{{"arch", model.arch}, {"tensors", entries}, {"scales_offset", scales_offset}};
    binio::write_container(path, kMagic, kVersion, header, payload.buffer());
}

Int8Model load_int8(const std::filesystem::path& path) {
    auto c = binio::read_container(path, kMagic, kVersion, kCorrupt);
    auto fail = [](const std::string& what) { return FormatError(std::string(kCorrupt) + ": " + what); };
    Int8Model m;
    try {
        m.arch = c.header.at("arch").get<ArchConfig>();
        const auto& table = c.header.at("tensors");
        auto scales_offset = c.header.at("scales_offset").get<std::size_t>();
        if (scales_offset > c.payload.size() || table.size() * 4 != c.payload.size() - scales_offset)
            throw fail("scale table out of range");
        std::size_t idx = 0;
        for (const auto& e : table) {
            Int8Tensor q;
            auto name = e.at("name").get<std::string>();
            q.shape = e.at("shape").get<Shape>();
            std::memcpy(&q.scale, c.payload.data() + scales_offset + 4 * idx++, 4);
            auto offset = e.at("offset").get<std::size_t>();
            auto length = e.at("length").get<std::size_t>();
            if (q.shape.empty() || length != shape_numel(q.shape)) throw fail("tensor '" + name + "' length mismatch");
            if (offset > scales_offset || length > scales_offset - offset)
                throw fail("tensor '" + name + "' offset out of range");
            q.q.resize(length);
            std::memcpy(q.q.data(), c.payload.data() + offset, length);
            m.tensors.emplace(name, std::move(q));
        }
    } catch (const nlohmann::json::exception& e) {
        throw fail(e.what());
    } catch (const InputError& e) {
        throw fail(e.what());
    }
    return m;
}

} // namespace dg
