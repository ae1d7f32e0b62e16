#include "hgen/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace hgen::img {

namespace {

uint32_t crc32_table_entry(uint32_t i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    return c;
}

uint32_t crc32(const uint8_t* buf, size_t len) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) t[i] = crc32_table_entry(i);
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ buf[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

uint32_t adler32(const uint8_t* buf, size_t len) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < len; ++i) {
        a = (a + buf[i]) % 65521;
        b = (b + a) % 65521;
    }
    return (b << 16) | a;
}

void push_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4],
                const std::vector<uint8_t>& payload) {
    push_u32(out, static_cast<uint32_t>(payload.size()));
    size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    push_u32(out, crc32(out.data() + crc_start, out.size() - crc_start));
}

}  // namespace

std::vector<uint8_t> encode_png_rgb(const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw DimensionError("encode_png_rgb: want {3,H,W}");
    int64_t H = image.shape[1], W = image.shape[2];
    if (H < 1 || W < 1) throw DimensionError("encode_png_rgb: empty image");

    // raw scanlines: filter byte 0 + RGB triples
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(H * (1 + 3 * W)));
    for (int64_t y = 0; y < H; ++y) {
        raw.push_back(0);
        for (int64_t x = 0; x < W; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                float v = image.data[static_cast<size_t>(ch * H * W + y * W + x)];
                v = std::clamp(v, 0.0f, 1.0f);
                raw.push_back(static_cast<uint8_t>(std::lround(v * 255.0f)));
            }
    }

    // zlib stream of stored (uncompressed) deflate blocks
    std::vector<uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    while (off < raw.size()) {
        size_t n = std::min<size_t>(raw.size() - off, 65535);
        bool last = off + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<uint8_t>(n & 0xFF));
        z.push_back(static_cast<uint8_t>(n >> 8));
        z.push_back(static_cast<uint8_t>(~n & 0xFF));
        z.push_back(static_cast<uint8_t>((~n >> 8) & 0xFF));
        z.insert(z.end(), raw.begin() + static_cast<int64_t>(off),
                 raw.begin() + static_cast<int64_t>(off + n));
        off += n;
    }
    push_u32(z, adler32(raw.data(), raw.size()));

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    std::vector<uint8_t> ihdr;
    push_u32(ihdr, static_cast<uint32_t>(W));
    push_u32(ihdr, static_cast<uint32_t>(H));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", z);
    push_chunk(out, "IEND", {});
    return out;
}

void write_png_rgb(const std::string& path, const Tensor& image) {
    auto bytes = encode_png_rgb(image);
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw SchemaError("write_png_rgb: cannot write " + path);
}

namespace {

uint32_t read_u32(const std::vector<uint8_t>& b, size_t off) {
    return (static_cast<uint32_t>(b.at(off)) << 24) |
           (static_cast<uint32_t>(b.at(off + 1)) << 16) |
           (static_cast<uint32_t>(b.at(off + 2)) << 8) | b.at(off + 3);
}

}  // namespace

Tensor decode_png_rgb(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw SchemaError("decode_png_rgb: bad signature");

    int64_t W = 0, H = 0;
    std::vector<uint8_t> idat;
    size_t off = 8;
    while (off + 8 <= bytes.size()) {
        uint32_t len = read_u32(bytes, off);
        std::string type(bytes.begin() + static_cast<int64_t>(off + 4),
                         bytes.begin() + static_cast<int64_t>(off + 8));
        size_t payload = off + 8;
        if (payload + len + 4 > bytes.size())
            throw SchemaError("decode_png_rgb: truncated chunk");
        uint32_t want = read_u32(bytes, payload + len);
        if (crc32(bytes.data() + off + 4, len + 4) != want)
            throw SchemaError("decode_png_rgb: chunk crc mismatch");
        if (type == "IHDR") {
            W = read_u32(bytes, payload);
            H = read_u32(bytes, payload + 4);
            if (bytes.at(payload + 8) != 8 || bytes.at(payload + 9) != 2)
                throw SchemaError("decode_png_rgb: only 8-bit RGB supported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), bytes.begin() + static_cast<int64_t>(payload),
                        bytes.begin() + static_cast<int64_t>(payload + len));
        } else if (type == "IEND") {
            break;
        }
        off = payload + len + 4;
    }
    if (W < 1 || H < 1 || idat.size() < 6)
        throw SchemaError("decode_png_rgb: missing IHDR/IDAT");

    // stored-deflate blocks only
    std::vector<uint8_t> raw;
    size_t p = 2;  // skip zlib header
    for (;;) {
        if (p + 5 > idat.size()) throw SchemaError("decode_png_rgb: truncated deflate");
        uint8_t header = idat[p];
        if ((header & 0x06) != 0)
            throw SchemaError("decode_png_rgb: compressed deflate unsupported");
        size_t n = idat[p + 1] | (static_cast<size_t>(idat[p + 2]) << 8);
        p += 5;
        if (p + n > idat.size()) throw SchemaError("decode_png_rgb: truncated block");
        raw.insert(raw.end(), idat.begin() + static_cast<int64_t>(p),
                   idat.begin() + static_cast<int64_t>(p + n));
        p += n;
        if (header & 1) break;
    }
    if (static_cast<int64_t>(raw.size()) != H * (1 + 3 * W))
        throw SchemaError("decode_png_rgb: unexpected scanline payload size");
    if (adler32(raw.data(), raw.size()) != read_u32(idat, p))
        throw SchemaError("decode_png_rgb: adler mismatch");

    Tensor out({3, H, W});
    for (int64_t y = 0; y < H; ++y) {
        size_t line = static_cast<size_t>(y * (1 + 3 * W));
        if (raw[line] != 0) throw SchemaError("decode_png_rgb: unsupported filter");
        for (int64_t x = 0; x < W; ++x)
            for (int ch = 0; ch < 3; ++ch)
                out.data[static_cast<size_t>(ch * H * W + y * W + x)] =
                    static_cast<float>(raw[line + 1 + static_cast<size_t>(3 * x + ch)]) /
                    255.0f;
    }
    return out;
}

Tensor read_png_rgb(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SchemaError("read_png_rgb: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_png_rgb(bytes);
}

}  // namespace hgen::img
