#include "patchforge/model/serialize.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "patchforge/error.hpp"
#include "patchforge/io/files.hpp"

namespace patchforge::model {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'P', 'F', 'M', 'O', 'D', 'E', 'L', '\0'};

static_assert(std::endian::native == std::endian::little, "model container assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>((v >> s) & 0xff));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return std::uint32_t{b[off]} | (std::uint32_t{b[off + 1]} << 8) | (std::uint32_t{b[off + 2]} << 16) |
           (std::uint32_t{b[off + 3]} << 24);
}

}  // namespace

fs::path sidecar_path(const fs::path& path) {
    fs::path p = path;
    p += ".json";
    return p;
}

std::vector<std::uint8_t> encode_model(const Network<float>& net) {
    std::vector<std::uint8_t> out(kMagic, kMagic + sizeof kMagic);
    put_u32(out, kModelFormatVersion);
    const auto& params = net.parameters();
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& t : params) {
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (const auto& t : params) {
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data());
        out.insert(out.end(), bytes, bytes + t.size() * sizeof(float));
    }
    put_u32(out, io::crc32(out));
    return out;
}

void save_model(const Network<float>& net, const fs::path& path) {
    const auto bytes = encode_model(net);
    const nlohmann::json meta{{"format", "patchforge-model"},
                              {"version", kModelFormatVersion},
                              {"architecture", net.architecture().to_json()},
                              {"training", net.info.to_json()},
                              {"crc32", get_u32(bytes, bytes.size() - 4)}};
    io::write_atomic(path, bytes);
    io::write_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

Network<float> load_model(const fs::path& path) {
    const auto b = io::read_bytes(path);
    const std::string name = path.string();
    if (b.size() < sizeof kMagic + 12) throw ChecksumError(name + ": file truncated (" + std::to_string(b.size()) + " bytes)");
    const std::uint32_t stored = get_u32(b, b.size() - 4);
    const std::uint32_t actual = io::crc32(std::span<const std::uint8_t>(b.data(), b.size() - 4));
    if (stored != actual) throw ChecksumError(name + ": checksum mismatch (file corrupted or truncated)");
    if (std::memcmp(b.data(), kMagic, sizeof kMagic) != 0) throw FormatError(name + ": byte 0: bad magic");
    const std::uint32_t version = get_u32(b, 8);
    if (version != kModelFormatVersion)
        throw VersionError(name + ": byte 8: format version " + std::to_string(version) + ", expected " +
                           std::to_string(kModelFormatVersion));

    const std::size_t end = b.size() - 4;
    std::size_t off = 12;
    auto need = [&](std::size_t n) {
        if (off + n > end) throw FormatError(name + ": byte " + std::to_string(off) + ": unexpected end of shape table");
    };
    need(4);
    const std::uint32_t count = get_u32(b, off);
    off += 4;
    std::vector<diff::Shape> shapes;
    for (std::uint32_t i = 0; i < count; ++i) {
        need(4);
        const std::uint32_t rank = get_u32(b, off);
        off += 4;
        if (rank > 8) throw FormatError(name + ": byte " + std::to_string(off - 4) + ": implausible rank");
        diff::Shape s;
        for (std::uint32_t r = 0; r < rank; ++r) {
            need(4);
            s.push_back(get_u32(b, off));
            off += 4;
        }
        shapes.push_back(std::move(s));
    }
    std::vector<diff::Tensor<float>> params;
    for (auto& s : shapes) {
        const std::size_t bytes = diff::numel(s) * sizeof(float);
        if (off + bytes > end) throw FormatError(name + ": byte " + std::to_string(off) + ": tensor data truncated");
        std::vector<float> values(diff::numel(s));
        std::memcpy(values.data(), b.data() + off, bytes);
        off += bytes;
        params.emplace_back(std::move(s), std::move(values));
    }
    if (off != end) throw FormatError(name + ": byte " + std::to_string(off) + ": trailing bytes before checksum");

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(io::read_text(sidecar_path(path)));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(sidecar_path(path).string() + ": " + e.what());
    }
    if (meta.value("version", 0u) != kModelFormatVersion)
        throw VersionError(sidecar_path(path).string() + ": metadata version mismatch");
    Network<float> net(Architecture::from_json(meta.at("architecture")), std::move(params));
    if (meta.contains("training")) net.info = TrainingInfo::from_json(meta.at("training"));
    return net;
}

}  // namespace patchforge::model
