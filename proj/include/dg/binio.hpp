#pragma once

// Little-endian helpers shared by the DGCK / DGDL / DGI8 container formats.
// Every container starts with: 4-byte magic, u32 version, u64 header length,
// UTF-8 JSON header, then raw payload blocks addressed by the header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace dg::binio {

static_assert(std::endian::native == std::endian::little, "container formats assume a little-endian host");

class Writer {
  public:
    void bytes(const void* p, std::size_t n) {
        auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <typename T>
    void pod(T v) {
        bytes(&v, sizeof v);
    }
    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

  private:
    std::vector<std::uint8_t> buf_;
};

struct Container {
    nlohmann::json header;
    std::size_t header_bytes = 0;     // length of the JSON text
    std::vector<std::uint8_t> payload; // everything after the header
};

/// Writes magic/version/header then `payload`; throws IoError naming `path`.
void write_container(const std::filesystem::path& path, std::string_view magic, std::uint32_t version,
                     const nlohmann::json& header, const std::vector<std::uint8_t>& payload);

/// Reads and validates magic and version (FormatError "unsupported format").
/// A malformed header or short file raises FormatError with `corrupt_msg`.
Container read_container(const std::filesystem::path& path, std::string_view magic, std::uint32_t version,
                         const std::string& corrupt_msg);

/// Size of the fixed preamble plus JSON header.
inline constexpr std::size_t kPreambleBytes = 4 + 4 + 8;

} // namespace dg::binio
