#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace patchforge::io {

struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 or 3
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

// PNG encoding via libpng's simplified API; output bytes depend only on the pixels.
std::vector<std::uint8_t> encode_png(const Image8& image);
void write_png(const std::filesystem::path& path, const Image8& image);

// Decodes any PNG into 8-bit RGB.
Image8 read_png_rgb(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over the target.
void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_atomic(const std::filesystem::path& path, std::string_view text);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace patchforge::io
