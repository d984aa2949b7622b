#include "dg/binio.hpp"

#include <fstream>
#include <iterator>

#include "dg/error.hpp"

namespace dg::binio {

void write_container(const std::filesystem::path& path, std::string_view magic, std::uint32_t version,
                     const nlohmann::json& header, const std::vector<std::uint8_t>& payload) {
    std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    std::uint64_t len = text.size();
    out.write(magic.data(), 4);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path, std::string_view magic, std::uint32_t version,
                         const std::string& corrupt_msg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < kPreambleBytes || std::memcmp(bytes.data(), magic.data(), 4) != 0)
        throw FormatError("unsupported format: '" + path.string() + "' is not a " + std::string(magic) + " file");
    std::uint32_t file_version;
    std::memcpy(&file_version, bytes.data() + 4, 4);
    if (file_version != version)
        throw FormatError("unsupported format: " + std::string(magic) + " version " + std::to_string(file_version));
    std::uint64_t len;
    std::memcpy(&len, bytes.data() + 8, 8);
    if (len > bytes.size() - kPreambleBytes) throw FormatError(corrupt_msg + ": header extends past end of file");

    Container c;
    c.header_bytes = len;
    try {
        c.header = nlohmann::json::parse(bytes.begin() + kPreambleBytes,
                                         bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleBytes + len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(corrupt_msg + ": bad header (" + e.what() + ")");
    }
    c.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleBytes + len), bytes.end());
    return c;
}

} // namespace dg::binio
