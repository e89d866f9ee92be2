#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sonoseg/errors.hpp"
#include "sonoseg/image.hpp"

namespace sonoseg {

enum class SchemaKind { dense, sparse };

/// Class numbering is 1-based everywhere, matching the task definition:
/// dense 1..7, sparse 1..4. Label maps store these indices directly.
namespace dense_class {
constexpr std::uint8_t aline = 1;
constexpr std::uint8_t bline = 2;
constexpr std::uint8_t healthy_pleural = 3;
constexpr std::uint8_t unhealthy_pleural = 4;
constexpr std::uint8_t healthy_region = 5;
constexpr std::uint8_t unhealthy_region = 6;
constexpr std::uint8_t background = 7;
} // namespace dense_class

namespace sparse_class {
constexpr std::uint8_t aline = 1;
constexpr std::uint8_t bline = 2;
constexpr std::uint8_t pleural = 3;
constexpr std::uint8_t background = 4;
} // namespace sparse_class

struct LabelSchema {
    SchemaKind kind;
    std::string name;
    std::vector<std::string> class_names; // entry i is class index i+1

    int num_classes() const { return static_cast<int>(class_names.size()); }

    const std::string& class_name(int index1) const {
        if (index1 < 1 || index1 > num_classes())
            throw ValidationError("class index " + std::to_string(index1) + " out of range for schema " + name);
        return class_names[static_cast<std::size_t>(index1 - 1)];
    }
};

inline const LabelSchema& dense_schema() {
    static const LabelSchema s{SchemaKind::dense,
                               "dense",
                               {"A-line", "B-line", "Healthy Pleural line", "Unhealthy Pleural line",
                                "Healthy Region", "Unhealthy Region", "Background"}};
    return s;
}

inline const LabelSchema& sparse_schema() {
    static const LabelSchema s{SchemaKind::sparse, "sparse", {"A-line", "B-line", "Pleural line", "Background"}};
    return s;
}

inline const LabelSchema& schema_of(SchemaKind k) {
    return k == SchemaKind::dense ? dense_schema() : sparse_schema();
}

/// Per-pixel class-index image under a declared schema.
struct LabelMap {
    SchemaKind schema = SchemaKind::dense;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> px; // 1-based class indices, row-major

    LabelMap() = default;
    LabelMap(SchemaKind s, int h, int w, std::uint8_t fill)
        : schema(s), height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {
        if (h <= 0 || w <= 0) throw ValidationError("LabelMap: non-positive dims");
    }

    std::uint8_t& at(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(int r, int c) const { return px[static_cast<std::size_t>(r) * width + c]; }

    void validate() const {
        const int n = schema_of(schema).num_classes();
        for (std::uint8_t v : px)
            if (v < 1 || v > n)
                throw ValidationError("label value " + std::to_string(v) + " outside schema " +
                                      schema_of(schema).name + " (1.." + std::to_string(n) + ")");
    }

    bool operator==(const LabelMap& o) const {
        return schema == o.schema && height == o.height && width == o.width && px == o.px;
    }
};

/// The class-merge table: healthy/unhealthy pleural line collapse to the
/// single pleural line; healthy/unhealthy region join the background;
/// A-line and B-line pass through.
inline std::uint8_t merge_dense_class(std::uint8_t dense) {
    switch (dense) {
        case dense_class::aline: return sparse_class::aline;
        case dense_class::bline: return sparse_class::bline;
        case dense_class::healthy_pleural:
        case dense_class::unhealthy_pleural: return sparse_class::pleural;
        case dense_class::healthy_region:
        case dense_class::unhealthy_region:
        case dense_class::background: return sparse_class::background;
        default: throw ValidationError("merge_dense_class: invalid dense class " + std::to_string(dense));
    }
}

inline LabelMap remap_dense_to_sparse(const LabelMap& map) {
    if (map.schema != SchemaKind::dense)
        throw SchemaError("remap_dense_to_sparse: input schema must be dense, got " +
                          schema_of(map.schema).name);
    LabelMap out(SchemaKind::sparse, map.height, map.width, sparse_class::background);
    for (std::size_t i = 0; i < map.px.size(); ++i) out.px[i] = merge_dense_class(map.px[i]);
    return out;
}

namespace detail {

// Corner-aligned source coordinate for output index i of n when the source
// has m samples: i * (m-1) / (n-1).
inline double src_coord(int i, int n, int m) {
    if (n == 1) return 0.0;
    return static_cast<double>(i) * (m - 1) / (n - 1);
}

inline void check_resize_target(int th, int tw) {
    if (th < 2 || tw < 2)
        throw ValidationError("resize: target dims must be >= 2, got " + std::to_string(th) + "x" +
                              std::to_string(tw));
}

} // namespace detail

/// Bilinear resize with corner-aligned sampling: output pixel (r, c) samples
/// source coordinate (r*(H-1)/(TH-1), c*(W-1)/(TW-1)) and blends the four
/// surrounding texels. Output clamped to [0,1].
inline GreyImage resize_grey(const GreyImage& img, int target_h, int target_w) {
    detail::check_resize_target(target_h, target_w);
    if (img.height == target_h && img.width == target_w) return img;
    GreyImage out(target_h, target_w);
    for (int r = 0; r < target_h; ++r) {
        const double sr = detail::src_coord(r, target_h, img.height);
        const int r0 = static_cast<int>(sr);
        const int r1 = std::min(r0 + 1, img.height - 1);
        const double fr = sr - r0;
        for (int c = 0; c < target_w; ++c) {
            const double sc = detail::src_coord(c, target_w, img.width);
            const int c0 = static_cast<int>(sc);
            const int c1 = std::min(c0 + 1, img.width - 1);
            const double fc = sc - c0;
            const double v = (1 - fr) * ((1 - fc) * img.at(r0, c0) + fc * img.at(r0, c1)) +
                             fr * ((1 - fc) * img.at(r1, c0) + fc * img.at(r1, c1));
            out.at(r, c) = std::clamp(static_cast<float>(v), 0.0f, 1.0f);
        }
    }
    return out;
}

/// Nearest-neighbor resize preserving discrete labels; same corner-aligned
/// coordinates, rounded half away from zero.
inline LabelMap resize_labels(const LabelMap& map, int target_h, int target_w) {
    detail::check_resize_target(target_h, target_w);
    if (map.height == target_h && map.width == target_w) return map;
    LabelMap out(map.schema, target_h, target_w, 1);
    for (int r = 0; r < target_h; ++r) {
        const int sr = static_cast<int>(std::lround(detail::src_coord(r, target_h, map.height)));
        for (int c = 0; c < target_w; ++c) {
            const int sc = static_cast<int>(std::lround(detail::src_coord(c, target_w, map.width)));
            out.at(r, c) = map.at(sr, sc);
        }
    }
    return out;
}

// ---- colorized rendering ---------------------------------------------------

/// Palette v1. One frozen RGB triple per legend color name.
struct PaletteEntry {
    std::uint8_t class_index;
    const char* color_name;
    std::array<std::uint8_t, 3> rgb;
};

inline const std::vector<PaletteEntry>& palette_v1(SchemaKind kind) {
    static const std::vector<PaletteEntry> dense = {
        {dense_class::aline, "Yellow", {255, 242, 0}},
        {dense_class::bline, "Gray", {148, 150, 152}},
        {dense_class::healthy_pleural, "Green", {0, 166, 79}},
        {dense_class::unhealthy_pleural, "Orange", {245, 129, 55}},
        {dense_class::healthy_region, "Aquamarine", {0, 181, 190}},
        {dense_class::unhealthy_region, "CarnationPink", {242, 130, 180}},
        {dense_class::background, "Apricot", {251, 185, 130}},
    };
    static const std::vector<PaletteEntry> sparse = {
        {sparse_class::aline, "Yellow", {255, 242, 0}},
        {sparse_class::bline, "Gray", {148, 150, 152}},
        {sparse_class::pleural, "NavyBlue", {0, 110, 184}},
        {sparse_class::background, "Apricot", {251, 185, 130}},
    };
    return kind == SchemaKind::dense ? dense : sparse;
}

inline std::array<std::uint8_t, 3> class_color(SchemaKind kind, std::uint8_t class_index) {
    for (const auto& e : palette_v1(kind))
        if (e.class_index == class_index) return e.rgb;
    throw ValidationError("class_color: class " + std::to_string(class_index) + " not in palette");
}

inline RgbImage colorize(const LabelMap& map) {
    const auto& pal = palette_v1(map.schema);
    std::array<std::array<std::uint8_t, 3>, 8> lut{};
    for (const auto& e : pal) lut[e.class_index] = e.rgb;
    RgbImage out(map.height, map.width);
    for (int r = 0; r < map.height; ++r)
        for (int c = 0; c < map.width; ++c) out.set(r, c, lut[map.at(r, c)]);
    return out;
}

/// Inverse of colorize for palette-exact images.
inline LabelMap decolorize(const RgbImage& img, SchemaKind kind) {
    LabelMap out(kind, img.height, img.width, 1);
    const auto& pal = palette_v1(kind);
    for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
            const auto rgb = img.get(r, c);
            bool found = false;
            for (const auto& e : pal) {
                if (e.rgb == rgb) {
                    out.at(r, c) = e.class_index;
                    found = true;
                    break;
                }
            }
            if (!found)
                throw ValidationError("decolorize: pixel (" + std::to_string(r) + "," + std::to_string(c) +
                                      ") is not a palette color");
        }
    }
    return out;
}

// ---- label map file I/O ----------------------------------------------------

/// Label maps travel as 8-bit PGM whose pixel values are the class indices.
inline void write_labels_pgm(const LabelMap& map, const std::string& path) {
    write_pgm_bytes(map.px, map.height, map.width, path);
}

inline LabelMap read_labels_pgm(const std::string& path, SchemaKind kind) {
    int h = 0, w = 0;
    auto bytes = read_pgm_bytes(path, h, w);
    LabelMap map(kind, h, w, 1);
    map.px = std::move(bytes);
    map.validate();
    return map;
}

} // namespace sonoseg
