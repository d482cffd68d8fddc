#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "lvr/common.hpp"

namespace lvr {

namespace detail {

inline void png_u32be(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

inline void png_chunk(std::ofstream& out, const char type[4], const std::vector<std::uint8_t>& payload) {
    std::vector<std::uint8_t> head;
    png_u32be(head, static_cast<std::uint32_t>(payload.size()));
    out.write(reinterpret_cast<const char*>(head.data()), 4);
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    std::uint32_t crc = static_cast<std::uint32_t>(::crc32(0, body.data(), static_cast<uInt>(body.size())));
    std::vector<std::uint8_t> tail;
    png_u32be(tail, crc);
    out.write(reinterpret_cast<const char*>(tail.data()), 4);
}

inline void png_write(const std::string& path, std::size_t w, std::size_t h, std::uint8_t color_type,
                      const std::vector<std::array<std::uint8_t, 3>>& palette, const std::uint8_t* pixels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<std::uint8_t> ihdr;
    png_u32be(ihdr, static_cast<std::uint32_t>(w));
    png_u32be(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);           // bit depth
    ihdr.push_back(color_type);  // 0 gray, 3 indexed
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    png_chunk(out, "IHDR", ihdr);

    if (color_type == 3) {
        std::vector<std::uint8_t> plte;
        for (const auto& c : palette) plte.insert(plte.end(), c.begin(), c.end());
        png_chunk(out, "PLTE", plte);
    }

    std::vector<std::uint8_t> raw;
    raw.reserve(h * (w + 1));
    for (std::size_t y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), pixels + y * w, pixels + (y + 1) * w);
    }
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> idat(bound);
    if (::compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw DataError("png: zlib compression failed for " + path);
    idat.resize(bound);
    png_chunk(out, "IDAT", idat);
    png_chunk(out, "IEND", {});
}

}  // namespace detail

/// 8-bit palette-indexed PNG; `pixels` are palette indices, row-major.
inline void png_write_indexed(const std::string& path, std::size_t w, std::size_t h,
                              const std::vector<std::array<std::uint8_t, 3>>& palette,
                              const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != w * h) throw std::invalid_argument("png_write_indexed: pixel count mismatch");
    detail::png_write(path, w, h, 3, palette, pixels.data());
}

/// 8-bit grayscale PNG.
inline void png_write_gray(const std::string& path, std::size_t w, std::size_t h,
                           const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != w * h) throw std::invalid_argument("png_write_gray: pixel count mismatch");
    detail::png_write(path, w, h, 0, {}, pixels.data());
}

}  // namespace lvr
