#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace metapix::png {

struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 = grayscale, 3 = RGB
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

// 8-bit grayscale or RGB only; throws on I/O or format errors naming the path.
Image read(const std::string& path);
void write(const std::string& path, const Image& img);

}  // namespace metapix::png
