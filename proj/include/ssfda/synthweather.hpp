#pragma once

// Procedural road scenes and parametric weather corruption.
//
// Scenes: gradient sky band above a randomized horizon, a textured colored
// ground, and a textured gray road quadrilateral narrowing toward a randomized
// vanishing point. The label is the exact rasterization of the road polygon
// (pixel centers inside).
//
// Corruptions act on images only and always clip into [0, 1]:
//   fog   - Koschmieder attenuation toward a constant airlight, row-linear depth proxy
//   rain  - seeded anti-aliased streaks plus a severity-weighted 3×3 box blur
//   night - luminance scaling with a 1.5 gamma plus seeded sensor noise

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "mask.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace ssfda {

enum class CorruptionKind { Fog, Rain, Night };

inline std::string to_string(CorruptionKind k) {
    switch (k) {
    case CorruptionKind::Fog: return "fog";
    case CorruptionKind::Rain: return "rain";
    case CorruptionKind::Night: return "night";
    }
    return "?";
}

inline CorruptionKind corruption_kind_from_string(const std::string& s) {
    if (s == "fog") return CorruptionKind::Fog;
    if (s == "rain") return CorruptionKind::Rain;
    if (s == "night") return CorruptionKind::Night;
    throw Error("unknown corruption kind '" + s + "'");
}

/// fog: visibility in meters [30, 750]; rain: intensity in mm [1, 200]; night: luminance factor (0, 1].
struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::Fog;
    double severity = 0.0;

    void validate() const {
        switch (kind) {
        case CorruptionKind::Fog:
            if (!(severity >= 30.0 && severity <= 750.0))
                throw Error("fog visibility must be in [30, 750] m, got " + std::to_string(severity));
            break;
        case CorruptionKind::Rain:
            if (!(severity >= 1.0 && severity <= 200.0))
                throw Error("rain intensity must be in [1, 200] mm, got " + std::to_string(severity));
            break;
        case CorruptionKind::Night:
            if (!(severity > 0.0 && severity <= 1.0))
                throw Error("night factor must be in (0, 1], got " + std::to_string(severity));
            break;
        }
    }

    friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

struct Scene {
    Tensor image; // 3×h×w in [0, 1]
    Mask label;
    std::uint64_t seed = 0;
    std::vector<CorruptionSpec> corruption; // applied in order; empty = clean

    std::size_t height() const { return label.height; }
    std::size_t width() const { return label.width; }
};

// ---------------------------------------------------------------------------
// Scene generation

/// Road quadrilateral in pixel coordinates (x right, y down; y = h is the bottom edge).
struct RoadPolygon {
    std::array<double, 4> x; // top-left, top-right, bottom-right, bottom-left
    std::array<double, 4> y;
};

/// Pixel (r, c) is road iff its center lies inside the convex polygon.
inline Mask rasterize_polygon(const RoadPolygon& poly, std::size_t h, std::size_t w) {
    Mask m(h, w, 0);
    for (std::size_t r = 0; r < h; ++r) {
        const double py = static_cast<double>(r) + 0.5;
        for (std::size_t c = 0; c < w; ++c) {
            const double px = static_cast<double>(c) + 0.5;
            bool inside = true;
            for (std::size_t k = 0; k < 4 && inside; ++k) {
                const auto n = (k + 1) % 4;
                const double cross = (poly.x[n] - poly.x[k]) * (py - poly.y[k]) - (poly.y[n] - poly.y[k]) * (px - poly.x[k]);
                inside = cross >= 0.0;
            }
            m(r, c) = inside ? 1 : 0;
        }
    }
    return m;
}

struct SceneLayout {
    RoadPolygon road;
    double horizon = 0.0;
};

inline SceneLayout sample_layout(Rng& rng, std::size_t w, std::size_t h) {
    const double W = static_cast<double>(w), H = static_cast<double>(h);
    SceneLayout s;
    s.horizon = H * rng.uniform(0.30, 0.45);
    const double vx = W * rng.uniform(0.30, 0.70);
    const double top_half = W * rng.uniform(0.01, 0.04);
    const double bx = vx + W * rng.uniform(-0.25, 0.25);
    const double bottom_half = W * rng.uniform(0.25, 0.55);
    s.road.x = {vx - top_half, vx + top_half, bx + bottom_half, bx - bottom_half};
    s.road.y = {s.horizon, s.horizon, H, H};
    return s;
}

/// Deterministic labeled scene. Layouts are resampled until the road covers [0.1, 0.6] of the image.
inline Scene generate_scene(std::uint64_t seed, std::size_t w, std::size_t h) {
    if (w < 16 || h < 16) throw Error("generate_scene: width and height must be at least 16");
    Rng rng(seed);
    SceneLayout layout;
    Mask label;
    for (int attempt = 0;; ++attempt) {
        if (attempt == 1000) throw Error("generate_scene: could not satisfy the road-fraction contract");
        layout = sample_layout(rng, w, h);
        label = rasterize_polygon(layout.road, h, w);
        const double f = label.fraction();
        if (f >= 0.1 && f <= 0.6) break;
    }

    // Ground palette: grass, dry grass, or soil.
    static constexpr std::array<std::array<double, 3>, 3> kGround{{
        {0.20, 0.50, 0.15},
        {0.45, 0.50, 0.20},
        {0.45, 0.32, 0.18},
    }};
    const auto& base = kGround[rng.below(kGround.size())];
    std::array<double, 3> ground{};
    for (int ch = 0; ch < 3; ++ch) ground[ch] = std::clamp(base[ch] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    const double road_gray = rng.uniform(0.30, 0.50);
    const std::array<double, 3> sky_top{rng.uniform(0.35, 0.50), rng.uniform(0.55, 0.70), rng.uniform(0.85, 0.98)};
    const std::array<double, 3> sky_low{0.80, 0.86, 0.95};

    std::vector<double> img(3 * h * w);
    const std::size_t plane = h * w;
    for (std::size_t r = 0; r < h; ++r) {
        const double yc = static_cast<double>(r) + 0.5;
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t i = r * w + c;
            std::array<double, 3> px{};
            if (label.data[i]) {
                const double n = rng.uniform(-0.04, 0.04);
                for (int ch = 0; ch < 3; ++ch) px[ch] = road_gray + n + rng.uniform(-0.01, 0.01);
            } else if (yc < layout.horizon) {
                const double t = std::clamp(yc / layout.horizon, 0.0, 1.0);
                for (int ch = 0; ch < 3; ++ch)
                    px[ch] = (1.0 - t) * sky_top[ch] + t * sky_low[ch] + rng.uniform(-0.01, 0.01);
            } else {
                const double n = rng.uniform(-0.06, 0.06);
                for (int ch = 0; ch < 3; ++ch) px[ch] = ground[ch] + n + rng.uniform(-0.02, 0.02);
            }
            for (int ch = 0; ch < 3; ++ch) img[ch * plane + i] = std::clamp(px[ch], 0.0, 1.0);
        }
    }
    Scene s;
    s.image = Tensor({3, h, w}, std::move(img));
    s.label = std::move(label);
    s.seed = seed;
    return s;
}

// ---------------------------------------------------------------------------
// Corruptions

inline constexpr double kAirlight = 0.8;
inline constexpr double kNearDepth = 5.0;
inline constexpr double kFarDepth = 300.0;

/// Depth proxy: linear in row from kNearDepth (bottom row) to kFarDepth (top row).
inline double fog_depth(std::size_t row, std::size_t h) {
    if (h < 2) return kNearDepth;
    const double frac = static_cast<double>(h - 1 - row) / static_cast<double>(h - 1);
    return kNearDepth + (kFarDepth - kNearDepth) * frac;
}

inline double fog_transmission(double depth, double visibility) { return std::exp(-(3.912 / visibility) * depth); }

inline Tensor apply_fog(const Tensor& image, double visibility) {
    if (!(visibility > 0.0)) throw Error("apply_fog: visibility must be positive");
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    std::vector<double> out(image.values().begin(), image.values().end());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r) {
            const double t = fog_transmission(fog_depth(r, h), visibility);
            for (std::size_t col = 0; col < w; ++col) {
                double& v = out[(ch * h + r) * w + col];
                v = std::clamp(v * t + kAirlight * (1.0 - t), 0.0, 1.0);
            }
        }
    return Tensor(image.shape(), std::move(out));
}

/// 3×3 mean filter with edge replication.
inline Tensor box_blur3(const Tensor& image) {
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const auto in = image.values();
    std::vector<double> out(in.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t col = 0; col < w; ++col) {
                double s = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const auto rr = static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(r) + dy, 0, static_cast<long long>(h) - 1));
                        const auto cc = static_cast<std::size_t>(std::clamp<long long>(static_cast<long long>(col) + dx, 0, static_cast<long long>(w) - 1));
                        s += in[(ch * h + rr) * w + cc];
                    }
                out[(ch * h + r) * w + col] = s / 9.0;
            }
    return Tensor(image.shape(), std::move(out));
}

inline constexpr double kStreakBrightness = 0.9;
inline constexpr double kStreakAlpha = 0.4;

inline std::size_t rain_streak_count(double mm, std::size_t w, std::size_t h) {
    return static_cast<std::size_t>(std::llround(mm * static_cast<double>(w * h) / 4096.0));
}

/// Blur weight grows linearly with intensity, reaching 1 at 200 mm.
inline double rain_blur_strength(double mm) { return std::clamp(mm / 200.0, 0.0, 1.0); }

inline Tensor apply_rain(const Tensor& image, double mm, std::uint64_t seed) {
    if (!(mm >= 1.0 && mm <= 200.0)) throw Error("apply_rain: intensity must be in [1, 200] mm");
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const auto n = rain_streak_count(mm, w, h);

    // Coverage map from bilinear splats sampled every quarter pixel along each segment.
    std::vector<double> cover(h * w, 0.0);
    Rng rng(seed);
    constexpr double step = 0.25;
    for (std::size_t s = 0; s < n; ++s) {
        const double x0 = rng.uniform(0.0, static_cast<double>(w));
        const double y0 = rng.uniform(-8.0, static_cast<double>(h));
        const double len = rng.uniform(6.0, 14.0);
        const double angle = rng.uniform(-15.0, 15.0) * std::numbers::pi / 180.0;
        const double dx = std::sin(angle), dy = std::cos(angle);
        for (double t = 0.0; t <= len; t += step) {
            const double px = x0 + t * dx - 0.5, py = y0 + t * dy - 0.5;
            const double fx = std::floor(px), fy = std::floor(py);
            const double ax = px - fx, ay = py - fy;
            for (int oy = 0; oy <= 1; ++oy)
                for (int ox = 0; ox <= 1; ++ox) {
                    const long long yy = static_cast<long long>(fy) + oy, xx = static_cast<long long>(fx) + ox;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(w)) continue;
                    const double wgt = (oy ? ay : 1.0 - ay) * (ox ? ax : 1.0 - ax);
                    cover[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] += wgt * step;
                }
        }
    }

    std::vector<double> streaked(image.values().begin(), image.values().end());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) {
            const double a = kStreakAlpha * std::min(1.0, cover[i]);
            double& v = streaked[ch * h * w + i];
            v = v * (1.0 - a) + kStreakBrightness * a;
        }
    Tensor mid(image.shape(), std::move(streaked));
    const auto blurred = box_blur3(mid);
    const double s = rain_blur_strength(mm);
    std::vector<double> out(mid.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::clamp((1.0 - s) * mid[i] + s * blurred[i], 0.0, 1.0);
    return Tensor(image.shape(), std::move(out));
}

inline Tensor apply_night(const Tensor& image, double factor, std::uint64_t seed, double noise_sigma = 0.02) {
    if (!(factor > 0.0 && factor <= 1.0)) throw Error("apply_night: factor must be in (0, 1]");
    Rng rng(seed);
    std::vector<double> out(image.numel());
    const auto in = image.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double noise = noise_sigma > 0.0 ? rng.normal(0.0, noise_sigma) : 0.0;
        out[i] = std::clamp(factor * std::pow(in[i], 1.5) + noise, 0.0, 1.0);
    }
    return Tensor(image.shape(), std::move(out));
}

inline Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec, std::uint64_t seed) {
    spec.validate();
    switch (spec.kind) {
    case CorruptionKind::Fog: return apply_fog(image, spec.severity);
    case CorruptionKind::Rain: return apply_rain(image, spec.severity, seed);
    case CorruptionKind::Night: return apply_night(image, spec.severity, seed);
    }
    return image;
}

/// Apply a corruption chain to a scene; the label is carried over untouched.
inline Scene corrupt(const Scene& scene, const std::vector<CorruptionSpec>& chain) {
    Scene out = scene;
    Tensor img = scene.image;
    for (std::size_t i = 0; i < chain.size(); ++i)
        img = apply_corruption(img, chain[i], derive_seed(derive_seed(scene.seed, "corruption"), i));
    out.image = std::move(img);
    out.corruption.insert(out.corruption.end(), chain.begin(), chain.end());
    return out;
}

// ---------------------------------------------------------------------------
// Resampling (factor-2 reduction: bilinear for images, nearest for labels)

inline Tensor downsample_image(const Tensor& image) {
    return bilinear_resize(image.detach(), ResizeFactor::Half);
}

/// Nearest-neighbour halving, top-left sample of each 2×2 cell.
inline Mask downsample_label(const Mask& label) {
    if (label.height % 2 || label.width % 2)
        throw Error("downsample_label: dimensions must be even, got " + mask_shape_str(label));
    Mask out(label.height / 2, label.width / 2);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c) out(r, c) = label(2 * r, 2 * c);
    return out;
}

} // namespace ssfda
