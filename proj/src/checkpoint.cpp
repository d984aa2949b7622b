#include "dg/checkpoint.hpp"

#include <cstring>

#include "dg/binio.hpp"
#include "dg/error.hpp"

namespace dg {

namespace {

constexpr const char* kMagic = "DGCK";
constexpr std::uint32_t kVersion = 1;
constexpr const char* kCorrupt = "corrupt checkpoint";

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

} // namespace

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw MismatchError("checkpoint mismatch: missing tensor '" + name + "'");
    return it->second;
}

Tensor& Checkpoint::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw MismatchError("checkpoint mismatch: missing tensor '" + name + "'");
    return it->second;
}

void Checkpoint::check_layout() const {
    auto layout = param_layout(arch);
    if (layout.size() != tensors.size())
        throw MismatchError("checkpoint mismatch: expected " + std::to_string(layout.size()) + " tensors, found " +
                            std::to_string(tensors.size()));
    for (const auto& p : layout) {
        const auto& t = at(p.name);
        if (t.shape() != p.shape)
            throw MismatchError("checkpoint mismatch: tensor '" + p.name + "' has shape " + shape_str(t.shape()) +
                                ", expected " + shape_str(p.shape));
    }
}

bool bit_equal(const Checkpoint& a, const Checkpoint& b) {
    if (!(a.arch == b.arch) || a.meta != b.meta || a.tensors.size() != b.tensors.size()) return false;
    for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib)
        if (ia->first != ib->first || !bit_equal(ia->second, ib->second)) return false;
    return true;
}

void require_compatible(const Checkpoint& a, const Checkpoint& b) {
    if (!(a.arch == b.arch)) throw MismatchError("checkpoint mismatch: architectures differ");
    if (a.tensors.size() != b.tensors.size()) throw MismatchError("checkpoint mismatch: tensor counts differ");
    for (const auto& [name, t] : a.tensors) {
        auto it = b.tensors.find(name);
        if (it == b.tensors.end()) throw MismatchError("checkpoint mismatch: tensor '" + name + "' missing");
        if (it->second.shape() != t.shape())
            throw MismatchError("checkpoint mismatch: tensor '" + name + "' shape " + shape_str(t.shape()) +
                                " vs " + shape_str(it->second.shape()));
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json table = nlohmann::json::array();
    binio::Writer payload;
    for (const auto& [name, t] : ckpt.tensors) {
        std::size_t bytes = t.numel() * sizeof(float);
        table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}, {"length", bytes}});
        payload.bytes(t.ptr(), bytes);
    }
    nlohmann::json header{{"arch", ckpt.arch}, {"meta", ckpt.meta}, {"tensors", table}};
    binio::write_container(path, kMagic, kVersion, header, payload.buffer());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    auto c = binio::read_container(path, kMagic, kVersion, kCorrupt);
    Checkpoint ckpt;
    try {
        ckpt.arch = c.header.at("arch").get<ArchConfig>();
        ckpt.meta = c.header.at("meta").get<std::map<std::string, std::string>>();
        for (const auto& e : c.header.at("tensors")) {
            auto name = e.at("name").get<std::string>();
            auto shape = e.at("shape").get<Shape>();
            auto offset = e.at("offset").get<std::size_t>();
            auto length = e.at("length").get<std::size_t>();
            std::size_t numel = shape.empty() ? 0 : shape_numel(shape);
            if (shape.empty() || length != numel * sizeof(float))
                throw FormatError(std::string(kCorrupt) + ": tensor '" + name + "' length disagrees with shape");
            if (offset > c.payload.size() || length > c.payload.size() - offset)
                throw FormatError(std::string(kCorrupt) + ": tensor '" + name + "' extends past end of file");
            std::vector<float> values(numel);
            std::memcpy(values.data(), c.payload.data() + offset, length);
            ckpt.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string(kCorrupt) + ": " + e.what());
    } catch (const InputError& e) {
        throw FormatError(std::string(kCorrupt) + ": " + e.what());
    }
    return ckpt;
}

} // namespace dg
