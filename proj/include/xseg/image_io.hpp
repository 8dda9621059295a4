#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace xseg {

/// 8-bit image, row-major; `channels` is 1 (gray) or 3 (RGB).
struct Image8 {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;
};

/// Reads an 8-bit grayscale PNG without alpha. Throws FileError if the file cannot be
/// opened and FormatError for any other colour type or bit depth.
Image8 read_png_gray(const std::filesystem::path& path);

/// Writes 8-bit gray (channels == 1) or RGB (channels == 3).
void write_png(const std::filesystem::path& path, const Image8& image);

}  // namespace xseg
