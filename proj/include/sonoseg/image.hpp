#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sonoseg/errors.hpp"

namespace sonoseg {

/// Grey ultrasound image; intensities live in [0, 1].
struct GreyImage {
    int height = 0;
    int width = 0;
    std::vector<float> px; // row-major

    GreyImage() = default;
    GreyImage(int h, int w, float fill = 0.0f)
        : height(h), width(w), px(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {
        if (h <= 0 || w <= 0) throw ValidationError("GreyImage: non-positive dims");
    }

    float& at(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
    float at(int r, int c) const { return px[static_cast<std::size_t>(r) * width + c]; }

    bool operator==(const GreyImage& o) const {
        return height == o.height && width == o.width && px == o.px;
    }
};

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> px; // row-major, 3 bytes per pixel

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), px(static_cast<std::size_t>(h) * w * 3, 0) {}

    void set(int r, int c, std::array<std::uint8_t, 3> rgb) {
        const std::size_t i = (static_cast<std::size_t>(r) * width + c) * 3;
        px[i] = rgb[0];
        px[i + 1] = rgb[1];
        px[i + 2] = rgb[2];
    }
    std::array<std::uint8_t, 3> get(int r, int c) const {
        const std::size_t i = (static_cast<std::size_t>(r) * width + c) * 3;
        return {px[i], px[i + 1], px[i + 2]};
    }
};

namespace detail {

inline void read_netpbm_header(std::ifstream& f, const std::string& path, const char* magic, int& w,
                               int& h) {
    std::string m;
    f >> m;
    if (m != magic) throw IoError(path + ": expected " + magic + " header, got '" + m + "'");
    int maxval = 0;
    // Netpbm allows '#' comment lines between header tokens.
    auto next_int = [&](int& out) {
        while (true) {
            f >> std::ws;
            if (f.peek() == '#') {
                std::string line;
                std::getline(f, line);
                continue;
            }
            if (!(f >> out)) throw IoError(path + ": truncated header");
            return;
        }
    };
    next_int(w);
    next_int(h);
    next_int(maxval);
    if (w <= 0 || h <= 0) throw IoError(path + ": bad dimensions");
    if (maxval != 255) throw IoError(path + ": only maxval 255 supported, got " + std::to_string(maxval));
    f.get(); // single whitespace byte before raster
}

} // namespace detail

/// 8-bit binary PGM (P5). Grey values are normalized to [0,1] on load and
/// quantized with round(v * 255) on save.
inline void write_pgm(const GreyImage& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> raw(img.px.size());
    for (std::size_t i = 0; i < img.px.size(); ++i) {
        const float v = std::clamp(img.px[i], 0.0f, 1.0f);
        raw[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline GreyImage read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    int w = 0, h = 0;
    detail::read_netpbm_header(f, path, "P5", w, h);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError(path + ": unexpected EOF in raster");
    GreyImage img(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) img.px[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

/// Raw byte variant used for label maps, where each byte is a class index.
inline void write_pgm_bytes(const std::vector<std::uint8_t>& bytes, int height, int width,
                            const std::string& path) {
    if (static_cast<std::size_t>(height) * width != bytes.size())
        throw ValidationError("write_pgm_bytes: dims do not match data size");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<std::uint8_t> read_pgm_bytes(const std::string& path, int& height, int& width) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    detail::read_netpbm_header(f, path, "P5", width, height);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(width) * height);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError(path + ": unexpected EOF in raster");
    return raw;
}

/// Binary PPM (P6) for color renders.
inline void write_ppm(const RgbImage& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline RgbImage read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    int w = 0, h = 0;
    detail::read_netpbm_header(f, path, "P6", w, h);
    RgbImage img(h, w);
    f.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.px.size()))
        throw IoError(path + ": unexpected EOF in raster");
    return img;
}

} // namespace sonoseg
