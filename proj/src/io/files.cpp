#include "patchforge/io/files.hpp"

#include <png.h>
#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "patchforge/error.hpp"

namespace patchforge::io {

namespace fs = std::filesystem;

std::vector<std::uint8_t> encode_png(const Image8& image) {
    if (image.channels != 1 && image.channels != 3) throw Error("encode_png: only gray or RGB supported");
    if (image.pixels.size() != image.width * image.height * image.channels)
        throw Error("encode_png: pixel buffer does not match extent");
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
        throw Error(std::string("encode_png: ") + img.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
        throw Error(std::string("encode_png: ") + img.message);
    out.resize(size);
    return out;
}

void write_png(const fs::path& path, const Image8& image) { write_atomic(path, encode_png(image)); }

Image8 read_png_rgb(const fs::path& path) {
    const auto bytes = read_bytes(path);
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw FormatError(path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    Image8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = 3;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw FormatError(path.string() + ": " + msg);
    }
    return out;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw Error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_atomic(const fs::path& path, std::string_view text) {
    write_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong c = ::crc32(0L, Z_NULL, 0);
    c = ::crc32(c, bytes.data(), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(c);
}

}  // namespace patchforge::io
