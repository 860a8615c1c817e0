#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace n2m {

// 8-bit image in channel-major (CHW) layout; 1 channel (mask) or 3 (RGB).
struct ImageU8 {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> pixels;  // channels * height * width

    std::uint8_t& at(int c, int y, int x) {
        return pixels[std::size_t((c * height + y) * width + x)];
    }
    std::uint8_t at(int c, int y, int x) const {
        return pixels[std::size_t((c * height + y) * width + x)];
    }
};

ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& image);

}  // namespace n2m
