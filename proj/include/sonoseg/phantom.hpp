#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sonoseg/dataset.hpp"
#include "sonoseg/labels.hpp"
#include "sonoseg/rng.hpp"

namespace sonoseg {

/// Original feature-engineering target size; desk-scale runs default to
/// 128x96 (see PhantomParams).
constexpr int kPaperImageWidth = 624;
constexpr int kPaperImageHeight = 464;

struct BLineSpec {
    double center_frac = 0.5; // column center as a fraction of width
    int width_px = 2;         // streak core width
};

/// Geometry and texture knobs for one synthetic B-scan. The construction is
/// deliberately schematic, not a physical wave simulation: it exists to give
/// the structures their defining appearance (bright pleural band, horizontal
/// A-line reverberations at depth multiples, vertical B-line streaks) with
/// pixel-exact labels.
struct PhantomParams {
    int height = 96;
    int width = 128;
    double pleura_depth_frac = 0.25;  // (0.1, 0.5)
    int pleura_thickness_px = 3;
    double pleura_curve_amp_px = 1.5; // vertical bow of the pleural band
    int n_alines = 2;                 // [0, 4]
    std::vector<BLineSpec> b_lines;
    double speckle_strength = 0.15;   // [0, 1], multiplicative
    double intensity_decay = 0.8;     // exp(-decay * row / (H-1)) attenuation
    bool noise_free = false;          // skip speckle (structural tests)

    void validate() const {
        if (height < 12 || width < 12)
            throw ValidationError("PhantomParams: image too small (" + std::to_string(height) + "x" +
                                  std::to_string(width) + ")");
        if (!(pleura_depth_frac > 0.1 && pleura_depth_frac < 0.5))
            throw ValidationError("PhantomParams: pleura_depth_frac must be in (0.1, 0.5)");
        if (pleura_thickness_px < 1)
            throw ValidationError("PhantomParams: pleura_thickness_px must be >= 1");
        if (pleura_curve_amp_px < 0) throw ValidationError("PhantomParams: negative curvature");
        if (n_alines < 0 || n_alines > 4)
            throw ValidationError("PhantomParams: n_alines must be in [0, 4]");
        if (!(speckle_strength >= 0.0 && speckle_strength <= 1.0))
            throw ValidationError("PhantomParams: speckle_strength must be in [0, 1]");
        if (intensity_decay < 0) throw ValidationError("PhantomParams: negative intensity_decay");
        for (const auto& b : b_lines) {
            if (b.width_px < 1) throw ValidationError("PhantomParams: b_line width must be >= 1 px");
            if (b.center_frac < 0.0 || b.center_frac > 1.0)
                throw ValidationError("PhantomParams: b_line center_frac outside [0, 1]");
        }
        // The pleural band (plus curvature) must leave at least one row of
        // chest wall above and one of lung below.
        const double center = height * pleura_depth_frac;
        const int half_up = (pleura_thickness_px - 1) / 2;
        const int half_dn = pleura_thickness_px / 2;
        if (center - half_up - pleura_curve_amp_px < 1.0 ||
            center + half_dn + pleura_curve_amp_px > height - 2.0)
            throw ValidationError("PhantomParams: pleural band does not fit within the image");
    }
};

namespace detail {

constexpr int kBLineMarginPx = 2;     // unhealthy-region skirt on each side of a streak
constexpr double kPleuraBright = 0.95;
constexpr double kALineBright = 0.80; // scaled by 0.55^k per echo index k
constexpr double kALineEchoDecay = 0.55;
constexpr double kBLineBright = 0.80;
constexpr double kWallBright = 0.30;  // chest wall above the pleura
constexpr double kTissueBright = 0.12;
constexpr double kUnhealthyTissueBright = 0.18;

struct BLineZone {
    int core_lo, core_hi; // inclusive column span of the streak
    int zone_lo, zone_hi; // core plus margin
};

inline std::vector<BLineZone> b_line_zones(const PhantomParams& p) {
    std::vector<BLineZone> zones;
    zones.reserve(p.b_lines.size());
    for (const auto& b : p.b_lines) {
        const int center = static_cast<int>(std::lround(b.center_frac * (p.width - 1)));
        int lo = center - (b.width_px - 1) / 2;
        int hi = lo + b.width_px - 1;
        lo = std::clamp(lo, 0, p.width - 1);
        hi = std::clamp(hi, 0, p.width - 1);
        zones.push_back({lo, hi, std::max(0, lo - kBLineMarginPx), std::min(p.width - 1, hi + kBLineMarginPx)});
    }
    return zones;
}

inline bool in_core(const std::vector<BLineZone>& zs, int col) {
    for (const auto& z : zs)
        if (col >= z.core_lo && col <= z.core_hi) return true;
    return false;
}

inline bool in_zone(const std::vector<BLineZone>& zs, int col) {
    for (const auto& z : zs)
        if (col >= z.zone_lo && col <= z.zone_hi) return true;
    return false;
}

} // namespace detail

/// Deterministic synthetic B-scan with pixel-exact dense labels. Identical
/// (params, seed) always produce a bit-identical Sample.
inline Sample gen_phantom(const PhantomParams& p, std::uint64_t seed) {
    p.validate();
    const int H = p.height, W = p.width;
    Sample s;
    s.seed = seed;
    s.grey = GreyImage(H, W, 0.0f);
    s.labels = LabelMap(SchemaKind::dense, H, W, dense_class::background);

    const auto zones = detail::b_line_zones(p);
    const int aline_thickness = std::max(1, p.pleura_thickness_px - 1);

    auto attenuation = [&](int row) { return std::exp(-p.intensity_decay * row / (H - 1)); };
    auto pleura_center = [&](int col) {
        const double t = W > 1 ? static_cast<double>(col) / (W - 1) : 0.0;
        return static_cast<int>(std::lround(H * p.pleura_depth_frac + p.pleura_curve_amp_px * std::sin(M_PI * t)));
    };

    for (int col = 0; col < W; ++col) {
        const int center = pleura_center(col);
        const int band_top = center - (p.pleura_thickness_px - 1) / 2;
        const int band_bot = center + p.pleura_thickness_px / 2;
        const bool core = detail::in_core(zones, col);
        const bool zone = detail::in_zone(zones, col);

        for (int row = 0; row < H; ++row) {
            const double att = attenuation(row);
            double g;
            std::uint8_t label;
            if (row < band_top) {
                g = detail::kWallBright * att;
                label = dense_class::background;
            } else if (row <= band_bot) {
                g = detail::kPleuraBright * att;
                label = zone ? dense_class::unhealthy_pleural : dense_class::healthy_pleural;
            } else if (core) {
                g = detail::kBLineBright * att;
                label = dense_class::bline;
            } else if (zone) {
                g = detail::kUnhealthyTissueBright * att;
                label = dense_class::unhealthy_region;
            } else {
                g = detail::kTissueBright * att;
                label = dense_class::healthy_region;
                // A-line reverberations at integer multiples of the
                // probe-pleura distance, geometrically dimmer per echo.
                for (int k = 1; k <= p.n_alines; ++k) {
                    const int echo_center = (k + 1) * center;
                    const int lo = echo_center - (aline_thickness - 1) / 2;
                    const int hi = echo_center + aline_thickness / 2;
                    if (row >= lo && row <= hi) {
                        g = detail::kPleuraBright * detail::kALineBright *
                            std::pow(detail::kALineEchoDecay, k - 1) * att;
                        label = dense_class::aline;
                        break;
                    }
                }
            }
            s.grey.at(row, col) = std::clamp(static_cast<float>(g), 0.0f, 1.0f);
            s.labels.at(row, col) = label;
        }
    }

    // Clamped multiplicative speckle: g *= 1 + strength * (2u - 1), with u
    // drawn per pixel in row-major order from the sample's substream.
    if (!p.noise_free && p.speckle_strength > 0.0) {
        SplitMix64 rng(derive_seed(seed, "speckle"));
        for (auto& v : s.grey.px) {
            const double factor = 1.0 + p.speckle_strength * (2.0 * rng.next_double() - 1.0);
            v = std::clamp(static_cast<float>(v * factor), 0.0f, 1.0f);
        }
    }
    return s;
}

/// Shape of a generated corpus: groups stand in for patients/videos, frames
/// for the images of each. Diagnosis drives the geometry ranges; the rules
/// are invented purely to make the task learnable and carry no clinical
/// meaning.
struct DatasetSpec {
    int groups_normal = 1;
    int groups_pneumonia = 1;
    int groups_covid = 1;
    int frames_per_group = 4;
    int height = 96;
    int width = 128;
    double speckle_strength = 0.15;
    bool noise_free = false;

    void validate() const {
        if (groups_normal < 0 || groups_pneumonia < 0 || groups_covid < 0)
            throw ValidationError("DatasetSpec: negative group count");
        if (groups_normal + groups_pneumonia + groups_covid < 1)
            throw ValidationError("DatasetSpec: need at least one group");
        if (frames_per_group < 1) throw ValidationError("DatasetSpec: frames_per_group must be >= 1");
    }
};

namespace detail {

inline const char* group_prefix(Diagnosis d) {
    switch (d) {
        case Diagnosis::Normal: return "nrm";
        case Diagnosis::Pneumonia: return "pne";
        case Diagnosis::Covid19: return "cov";
    }
    return "unk";
}

inline std::string zero_pad(int v, int digits) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < digits) s.insert(s.begin(), '0');
    return s;
}

// Diagnosis-conditioned parameter draw for one group.
inline PhantomParams group_params(const DatasetSpec& spec, Diagnosis d, SplitMix64& rng) {
    PhantomParams p;
    p.height = spec.height;
    p.width = spec.width;
    p.speckle_strength = spec.speckle_strength;
    p.noise_free = spec.noise_free;
    p.pleura_depth_frac = rng.next_in(0.18, 0.28);
    p.pleura_curve_amp_px = rng.next_in(0.5, 2.0);
    p.intensity_decay = rng.next_in(0.6, 0.9);

    int n_blines = 0;
    int b_width_lo = 1, b_width_hi = 2;
    switch (d) {
        case Diagnosis::Normal:
            p.pleura_thickness_px = rng.next_int(2, 3);
            p.n_alines = rng.next_int(2, 4);
            break;
        case Diagnosis::Pneumonia:
            p.pleura_thickness_px = rng.next_int(2, 3);
            p.n_alines = rng.next_int(0, 2);
            n_blines = rng.next_int(1, 2);
            b_width_lo = 1;
            b_width_hi = 2;
            break;
        case Diagnosis::Covid19:
            p.pleura_thickness_px = rng.next_int(4, 5); // thickened pleura
            p.n_alines = rng.next_int(0, 1);
            n_blines = rng.next_int(3, 4);
            b_width_lo = 2;
            b_width_hi = 3;
            break;
    }
    // Streaks are placed in disjoint column slots so zones never overlap.
    for (int i = 0; i < n_blines; ++i) {
        const double slot = 0.76 / n_blines;
        BLineSpec b;
        b.center_frac = 0.12 + slot * (i + 0.35 + 0.30 * rng.next_double());
        b.width_px = rng.next_int(b_width_lo, b_width_hi);
        p.b_lines.push_back(b);
    }
    return p;
}

// Small frame-to-frame wobble on top of the group geometry.
inline void frame_jitter(PhantomParams& p, SplitMix64& rng) {
    p.pleura_depth_frac += 0.008 * (2.0 * rng.next_double() - 1.0);
    p.pleura_curve_amp_px = std::max(0.0, p.pleura_curve_amp_px + 0.3 * (2.0 * rng.next_double() - 1.0));
    for (auto& b : p.b_lines)
        b.center_frac = std::clamp(b.center_frac + 0.008 * (2.0 * rng.next_double() - 1.0), 0.05, 0.95);
}

} // namespace detail

/// Generates the full corpus for a spec. Deterministic in (spec, master_seed):
/// every group and frame draws from its own derived substream.
inline std::vector<Sample> gen_dataset(const DatasetSpec& spec, std::uint64_t master_seed) {
    spec.validate();
    std::vector<Sample> samples;
    const Diagnosis order[3] = {Diagnosis::Normal, Diagnosis::Pneumonia, Diagnosis::Covid19};
    const int counts[3] = {spec.groups_normal, spec.groups_pneumonia, spec.groups_covid};
    for (int di = 0; di < 3; ++di) {
        const Diagnosis d = order[di];
        for (int g = 0; g < counts[di]; ++g) {
            const std::string group_id =
                std::string(detail::group_prefix(d)) + "-g" + detail::zero_pad(g, 2);
            SplitMix64 group_rng(derive_seed(master_seed, "group/" + group_id));
            const PhantomParams base = detail::group_params(spec, d, group_rng);
            for (int f = 0; f < spec.frames_per_group; ++f) {
                const std::string id = group_id + "-f" + detail::zero_pad(f, 3);
                PhantomParams p = base;
                SplitMix64 frame_rng(derive_seed(master_seed, "frame/" + id));
                detail::frame_jitter(p, frame_rng);
                Sample s = gen_phantom(p, derive_seed(master_seed, "sample/" + id));
                s.id = id;
                s.group_id = group_id;
                s.diagnosis = d;
                s.frame_index = f;
                samples.push_back(std::move(s));
            }
        }
    }
    return samples;
}

} // namespace sonoseg
