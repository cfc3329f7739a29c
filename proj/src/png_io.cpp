#include "metapix/png_io.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "metapix/common.hpp"

namespace metapix::png {

namespace {

const std::uint8_t kSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& body) {
    put_u32(out, std::uint32_t(body.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    const std::uint32_t crc =
        std::uint32_t(crc32(0, out.data() + start, uInt(out.size() - start)));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write(const std::string& path, const Image& img) {
    require(img.channels == 1 || img.channels == 3, "png write: channels must be 1 or 3");
    require(img.width > 0 && img.height > 0 &&
                long(img.pixels.size()) == long(img.width) * img.height * img.channels,
            "png write: inconsistent image buffer for " + path);

    // filter byte 0 per scanline
    const size_t stride = size_t(img.width) * img.channels;
    std::vector<std::uint8_t> raw((stride + 1) * img.height);
    for (int y = 0; y < img.height; ++y) {
        raw[y * (stride + 1)] = 0;
        std::memcpy(raw.data() + y * (stride + 1) + 1, img.pixels.data() + y * stride, stride);
    }

    uLongf clen = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> compressed(clen);
    const int rc = compress2(compressed.data(), &clen, raw.data(), uLong(raw.size()), 6);
    require(rc == Z_OK, "png write: deflate failed for " + path);
    compressed.resize(clen);

    std::vector<std::uint8_t> out(kSignature, kSignature + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, std::uint32_t(img.width));
    put_u32(ihdr, std::uint32_t(img.height));
    ihdr.push_back(8);                                  // bit depth
    ihdr.push_back(img.channels == 3 ? 2 : 0);          // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "png write: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), std::streamsize(out.size()));
    require(f.good(), "png write: short write to " + path);
}

Image read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "png read: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    require(buf.size() > 8 && std::memcmp(buf.data(), kSignature, 8) == 0,
            "png read: not a PNG file: " + path);

    Image img;
    int bit_depth = 0, color_type = -1;
    std::vector<std::uint8_t> idat;
    size_t pos = 8;
    while (pos + 8 <= buf.size()) {
        const std::uint32_t len = get_u32(buf.data() + pos);
        require(pos + 12 + len <= buf.size(), "png read: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
        const std::uint8_t* body = buf.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            require(len == 13, "png read: bad IHDR in " + path);
            img.width = int(get_u32(body));
            img.height = int(get_u32(body + 4));
            bit_depth = body[8];
            color_type = body[9];
            require(body[12] == 0, "png read: interlaced PNG unsupported: " + path);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), body, body + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    require(bit_depth == 8 && (color_type == 0 || color_type == 2),
            "png read: only 8-bit gray/RGB supported: " + path);
    img.channels = color_type == 2 ? 3 : 1;

    const size_t stride = size_t(img.width) * img.channels;
    std::vector<std::uint8_t> raw((stride + 1) * img.height);
    uLongf rlen = uLongf(raw.size());
    const int rc = uncompress(raw.data(), &rlen, idat.data(), uLong(idat.size()));
    require(rc == Z_OK && rlen == raw.size(), "png read: inflate failed for " + path);

    img.pixels.resize(stride * img.height);
    const int bpp = img.channels;
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[y * (stride + 1)];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + y * stride;
        const std::uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int left = x >= size_t(bpp) ? dst[x - bpp] : 0;
            const int above = up ? up[x] : 0;
            const int corner = (up && x >= size_t(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += above; break;
                case 3: v += (left + above) / 2; break;
                case 4: v += paeth(left, above, corner); break;
                default: fail("png read: unknown filter in " + path);
            }
            dst[x] = std::uint8_t(v & 0xff);
        }
    }
    return img;
}

}  // namespace metapix::png
