#pragma once

#include "dsplat/field.hpp"

#include <algorithm>
#include <numeric>

namespace dsplat {

struct ImageBuffer {
    int width = 0, height = 0;
    std::vector<double> rgb;  // interleaved, 3 * width * height, values in [0, 1]

    ImageBuffer() = default;
    ImageBuffer(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0.0) {}

    double* at(int x, int y) { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
    const double* at(int x, int y) const { return &rgb[(static_cast<size_t>(y) * width + x) * 3]; }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
};

struct DepthMap {
    int width = 0, height = 0;
    std::vector<double> depth;        // world-distance units, >= 0
    std::vector<double> accum_alpha;  // in [0, 1]

    DepthMap() = default;
    DepthMap(int w, int h)
        : width(w), height(h),
          depth(static_cast<size_t>(w) * h, 0.0),
          accum_alpha(static_cast<size_t>(w) * h, 0.0) {}

    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
};

struct RenderKind {
    enum class Tag { Color, Depth, HardDepth, SoftDepth };
    Tag tag = Tag::Color;
    double tau = 0.95;  // constant opacity for hard depth, in (0, 1)

    static RenderKind color() { return {Tag::Color, 0.0}; }
    static RenderKind depth() { return {Tag::Depth, 0.0}; }
    static RenderKind hard_depth(double tau) {
        if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("hard_depth: tau must be in (0, 1)");
        return {Tag::HardDepth, tau};
    }
    static RenderKind soft_depth() { return {Tag::SoftDepth, 0.0}; }
};

struct RenderSettings {
    Vec3 background = Vec3::Zero();
    double alpha_clamp = 0.99;         // cap on rendering opacity
    double alpha_skip = 1.0 / 255.0;   // terms below this contribute nothing
    double min_transmittance = 1e-4;   // front-to-back accumulation stops below this
    int threads = 1;
};

// Per-frame projection, depth sort, and pixel binning shared by the forward
// renders and the gradient passes. Sorting is by camera-space view_z with
// ties broken by primitive index; the rendered depth value itself uses the
// distance to the camera center.
struct FrameGeometry {
    int width = 0, height = 0;
    size_t n_primitives = 0;
    std::vector<Projected2D> proj;   // retained primitives, front-to-back order
    std::vector<int32_t> prim_of;    // sorted slot -> original primitive index
    std::vector<int32_t> bin_offsets;  // CSR over pixels, size width*height + 1
    std::vector<int32_t> bin_items;    // sorted slots whose bounding box covers the pixel

    const int32_t* pixel_begin(size_t pix) const { return bin_items.data() + bin_offsets[pix]; }
    const int32_t* pixel_end(size_t pix) const { return bin_items.data() + bin_offsets[pix + 1]; }
};

inline FrameGeometry prepare_frame(const GaussianField& field, const Camera& cam) {
    FrameGeometry frame;
    frame.width = cam.width;
    frame.height = cam.height;
    frame.n_primitives = field.size();

    std::vector<Projected2D> proj;
    std::vector<int32_t> idx;
    proj.reserve(field.size());
    idx.reserve(field.size());
    for (size_t i = 0; i < field.size(); ++i) {
        if (auto p = project(field.primitives[i], cam)) {
            proj.push_back(*p);
            idx.push_back(static_cast<int32_t>(i));
        }
    }

    std::vector<int32_t> order(proj.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
        if (proj[a].view_z != proj[b].view_z) return proj[a].view_z < proj[b].view_z;
        return idx[a] < idx[b];
    });

    frame.proj.reserve(proj.size());
    frame.prim_of.reserve(proj.size());
    for (int32_t o : order) {
        frame.proj.push_back(proj[o]);
        frame.prim_of.push_back(idx[o]);
    }

    // CSR binning: candidates per pixel in front-to-back order. Bounding
    // boxes over-approximate the circular support; the compositor re-tests
    // the exact radius, so a w == 0 candidate never contributes.
    const size_t npix = static_cast<size_t>(cam.width) * cam.height;
    std::vector<int32_t> counts(npix, 0);
    auto bbox = [&](const Projected2D& p, int& x0, int& x1, int& y0, int& y1) {
        x0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.x() - p.radius)));
        x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.mean2d.x() + p.radius)));
        y0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.y() - p.radius)));
        y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.mean2d.y() + p.radius)));
    };
    for (const auto& p : frame.proj) {
        int x0, x1, y0, y1;
        bbox(p, x0, x1, y0, y1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) counts[static_cast<size_t>(y) * cam.width + x]++;
    }
    frame.bin_offsets.assign(npix + 1, 0);
    for (size_t i = 0; i < npix; ++i) frame.bin_offsets[i + 1] = frame.bin_offsets[i] + counts[i];
    frame.bin_items.resize(static_cast<size_t>(frame.bin_offsets[npix]));
    std::vector<int32_t> cursor(frame.bin_offsets.begin(), frame.bin_offsets.end() - 1);
    for (int32_t s = 0; s < static_cast<int32_t>(frame.proj.size()); ++s) {
        int x0, x1, y0, y1;
        bbox(frame.proj[s], x0, x1, y0, y1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                frame.bin_items[static_cast<size_t>(cursor[static_cast<size_t>(y) * cam.width + x]++)] = s;
    }
    return frame;
}

namespace detail {

// One pixel of front-to-back compositing under Color / Depth semantics:
// alpha_i = min(opacity_i * w_i, clamp), terms below the skip threshold are
// dropped, accumulation stops once transmittance falls below the cutoff
// (never, for the reference path). `value` is the color or the distance.
struct CompositeOut {
    Vec3 rgb = Vec3::Zero();
    double scalar = 0.0;
    double accum_alpha = 0.0;
};

template <typename SlotRange>
inline CompositeOut composite_pixel(const RenderKind& kind, const SlotRange& slots,
                                    const std::vector<Projected2D>& proj,
                                    const std::vector<double>& opacities,
                                    const std::vector<Vec3>* colors,
                                    const std::vector<int32_t>& prim_of, const Vec2& pixel,
                                    const RenderSettings& s, bool allow_early_stop) {
    CompositeOut out;
    if (kind.tag == RenderKind::Tag::HardDepth) {
        // Literal constant-opacity form: tau * (1 - tau)^(i-1) * w_i * dist_i,
        // i counting covering primitives only. The learned opacity is unused.
        double atten = 1.0;
        for (int32_t slot : slots) {
            const double w = gaussian_weight(proj[slot], pixel);
            if (w == 0.0) continue;
            out.scalar += kind.tau * atten * w * proj[slot].dist;
            out.accum_alpha += kind.tau * atten;
            atten *= (1.0 - kind.tau);
        }
        out.accum_alpha = std::min(out.accum_alpha, 1.0);
        return out;
    }

    double transmittance = 1.0;
    for (int32_t slot : slots) {
        if (allow_early_stop && transmittance < s.min_transmittance) break;
        const double w = gaussian_weight(proj[slot], pixel);
        if (w == 0.0) continue;
        const double alpha = std::min(opacities[prim_of[slot]] * w, s.alpha_clamp);
        if (alpha < s.alpha_skip) continue;
        if (kind.tag == RenderKind::Tag::Color) {
            out.rgb += (*colors)[prim_of[slot]] * (alpha * transmittance);
        } else {
            out.scalar += proj[slot].dist * alpha * transmittance;
        }
        out.accum_alpha += alpha * transmittance;
        transmittance *= (1.0 - alpha);
    }
    if (kind.tag == RenderKind::Tag::Color) out.rgb += s.background * transmittance;
    return out;
}

inline std::vector<double> activated_opacities(const GaussianField& field) {
    std::vector<double> out(field.size());
    for (size_t i = 0; i < field.size(); ++i) out[i] = field.primitives[i].opacity();
    return out;
}

struct SlotSpan {
    const int32_t* b;
    const int32_t* e;
    const int32_t* begin() const { return b; }
    const int32_t* end() const { return e; }
};

}  // namespace detail

inline ImageBuffer render_color(const GaussianField& field, const Camera& cam,
                                const std::vector<Vec3>& colors,
                                const RenderSettings& settings = {}) {
    if (colors.size() != field.size())
        throw ValidationError("render_color: one color per primitive required");
    const FrameGeometry frame = prepare_frame(field, cam);
    const auto opac = detail::activated_opacities(field);
    ImageBuffer img(cam.width, cam.height);
    parallel_for_chunks(img.pixel_count(), settings.threads, [&](int64_t b, int64_t e) {
        for (int64_t pix = b; pix < e; ++pix) {
            const Vec2 pixel(static_cast<double>(pix % cam.width), static_cast<double>(pix / cam.width));
            const detail::SlotSpan span{frame.pixel_begin(pix), frame.pixel_end(pix)};
            const auto o = detail::composite_pixel(RenderKind::color(), span, frame.proj, opac,
                                                   &colors, frame.prim_of, pixel, settings, true);
            img.rgb[pix * 3 + 0] = o.rgb.x();
            img.rgb[pix * 3 + 1] = o.rgb.y();
            img.rgb[pix * 3 + 2] = o.rgb.z();
        }
    });
    return img;
}

namespace detail {

inline DepthMap render_depth_kind(const RenderKind& kind, const GaussianField& field,
                                  const Camera& cam, const RenderSettings& settings) {
    const FrameGeometry frame = prepare_frame(field, cam);
    const auto opac = activated_opacities(field);
    DepthMap map(cam.width, cam.height);
    parallel_for_chunks(map.pixel_count(), settings.threads, [&](int64_t b, int64_t e) {
        for (int64_t pix = b; pix < e; ++pix) {
            const Vec2 pixel(static_cast<double>(pix % cam.width), static_cast<double>(pix / cam.width));
            const SlotSpan span{frame.pixel_begin(pix), frame.pixel_end(pix)};
            const auto o = composite_pixel(kind, span, frame.proj, opac, nullptr, frame.prim_of,
                                           pixel, settings, true);
            map.depth[pix] = o.scalar;
            map.accum_alpha[pix] = o.accum_alpha;
        }
    });
    return map;
}

}  // namespace detail

// Expected depth: sum of distance-to-camera-center weighted by the same
// rendering opacities as the color pass. Raw weighted sum, not normalized.
inline DepthMap render_depth(const GaussianField& field, const Camera& cam,
                             const RenderSettings& settings = {}) {
    return detail::render_depth_kind(RenderKind::depth(), field, cam, settings);
}

// Depth with every opacity replaced by the constant tau. Isolates the
// nearest covering primitives; gradients reach centers only (the shape
// groups are frozen by the caller, opacity is structurally absent).
inline DepthMap render_hard_depth(const GaussianField& field, const Camera& cam, double tau,
                                  const RenderSettings& settings = {}) {
    return detail::render_depth_kind(RenderKind::hard_depth(tau), field, cam, settings);
}

// Forward-identical to render_depth; the distinction is the gradient
// contract (center/scale/rotation are detached in the backward pass).
inline DepthMap render_soft_depth(const GaussianField& field, const Camera& cam,
                                  const RenderSettings& settings = {}) {
    return detail::render_depth_kind(RenderKind::soft_depth(), field, cam, settings);
}

// Brute-force oracle: every primitive is projected and evaluated at every
// pixel, sorted, and accumulated with no binning and no early termination.
// The per-term opacity rules (clamp and skip threshold) are shared
// definitions and are retained.
inline detail::CompositeOut composite_reference(const GaussianField& field, const Camera& cam,
                                                const RenderKind& kind, const Vec2& pixel,
                                                const std::vector<Vec3>* colors = nullptr,
                                                const RenderSettings& settings = {}) {
    std::vector<Projected2D> proj;
    std::vector<int32_t> idx;
    for (size_t i = 0; i < field.size(); ++i) {
        if (auto p = project(field.primitives[i], cam)) {
            proj.push_back(*p);
            idx.push_back(static_cast<int32_t>(i));
        }
    }
    std::vector<int32_t> slots(proj.size());
    std::iota(slots.begin(), slots.end(), 0);
    std::stable_sort(slots.begin(), slots.end(),
                     [&](int32_t a, int32_t b) { return proj[a].view_z < proj[b].view_z; });
    const auto opac = detail::activated_opacities(field);
    return detail::composite_pixel(kind, slots, proj, opac, colors, idx, pixel, settings, false);
}

inline ImageBuffer reference_render_color(const GaussianField& field, const Camera& cam,
                                          const std::vector<Vec3>& colors,
                                          const RenderSettings& settings = {}) {
    ImageBuffer img(cam.width, cam.height);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const auto o = composite_reference(field, cam, RenderKind::color(), Vec2(x, y),
                                               &colors, settings);
            img.at(x, y)[0] = o.rgb.x();
            img.at(x, y)[1] = o.rgb.y();
            img.at(x, y)[2] = o.rgb.z();
        }
    }
    return img;
}

inline DepthMap reference_render_depth(const GaussianField& field, const Camera& cam,
                                       const RenderKind& kind, const RenderSettings& settings = {}) {
    DepthMap map(cam.width, cam.height);
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            const auto o = composite_reference(field, cam, kind, Vec2(x, y), nullptr, settings);
            map.depth[static_cast<size_t>(y) * cam.width + x] = o.scalar;
            map.accum_alpha[static_cast<size_t>(y) * cam.width + x] = o.accum_alpha;
        }
    }
    return map;
}

}  // namespace dsplat
