#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "sonoseg/dataset.hpp"

namespace sonoseg {

/// Mirror grey and labels about the vertical axis; diagnosis and grouping
/// are untouched. Involutive bit-exactly.
inline Sample flip_lr(const Sample& s) {
    Sample out = s;
    for (int r = 0; r < s.grey.height; ++r)
        for (int c = 0; c < s.grey.width; ++c) out.grey.at(r, c) = s.grey.at(r, s.grey.width - 1 - c);
    for (int r = 0; r < s.labels.height; ++r)
        for (int c = 0; c < s.labels.width; ++c) out.labels.at(r, c) = s.labels.at(r, s.labels.width - 1 - c);
    return out;
}

/// Scale grey intensities by a factor in [0.8, 1.1], clamping to [0,1].
/// Labels are never touched.
inline Sample intensity_scale(const Sample& s, float factor) {
    if (!(factor >= 0.8f && factor <= 1.1f))
        throw ValidationError("intensity_scale: factor " + std::to_string(factor) + " outside [0.8, 1.1]");
    Sample out = s;
    for (auto& v : out.grey.px) v = std::clamp(v * factor, 0.0f, 1.0f);
    return out;
}

/// The three scales of the 6x expansion. With {identity, flip} they give the
/// fixed reading of "various scales in [0.8, 1.1]".
constexpr float kAugmentScales[3] = {0.8f, 1.0f, 1.1f};

/// Expands each sample into 6 variants: {original, flipped} x {0.8, 1.0, 1.1}.
/// Variants inherit the source's group_id and carry a provenance tag
/// ("scale1.0", "flip+scale0.8", ...); ids get the tag as a suffix.
inline std::vector<Sample> expand_sixfold(const std::vector<Sample>& dataset) {
    static const char* scale_tag[3] = {"scale0.8", "scale1.0", "scale1.1"};
    std::vector<Sample> out;
    out.reserve(dataset.size() * 6);
    for (const auto& src : dataset) {
        for (int flip = 0; flip < 2; ++flip) {
            const Sample base = flip ? flip_lr(src) : src;
            for (int si = 0; si < 3; ++si) {
                Sample v = intensity_scale(base, kAugmentScales[si]);
                v.augment = flip ? std::string("flip+") + scale_tag[si] : scale_tag[si];
                v.id = src.id + "-" + v.augment;
                out.push_back(std::move(v));
            }
        }
    }
    return out;
}

} // namespace sonoseg
