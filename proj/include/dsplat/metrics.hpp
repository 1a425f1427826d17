#pragma once

#include "dsplat/color.hpp"
#include "dsplat/data.hpp"
#include "dsplat/losses.hpp"

namespace dsplat {

constexpr double kPsnrCap = 99.0;  // reported for exact matches

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.rgb.size() != b.rgb.size()) throw ValidationError("psnr: dimension mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double e = a.rgb[i] - b.rgb[i];
        mse += e * e;
    }
    mse /= static_cast<double>(a.rgb.size());
    if (mse <= 0) return kPsnrCap;
    return std::min(-10.0 * std::log10(mse), kPsnrCap);
}

struct Metrics {
    double psnr = 0;
    double ssim = 0;
    double depth_mae = 0;
    double depth_rmse = 0;
    size_t depth_pixels = 0;  // pixels that passed the coverage mask
};

// Renders the view and scores it against the stored ground truth. Depth
// errors are measured only where the rendered accumulated alpha exceeds 0.5
// and a positive reference depth exists.
inline Metrics evaluate_view(const GaussianField& field, const NeuralColorState* neural,
                             const View& view, const RenderSettings& settings = {}) {
    Metrics m;
    const auto colors = compute_colors(field, neural, view.camera);
    const auto img = render_color(field, view.camera, colors, settings);
    m.psnr = psnr(img, view.image);
    m.ssim = ssim(img, view.image);
    if (view.depth_gt) {
        const auto d = render_depth(field, view.camera, settings);
        double abs_sum = 0, sq_sum = 0;
        for (size_t i = 0; i < d.depth.size(); ++i) {
            if (d.accum_alpha[i] > 0.5 && view.depth_gt->depth[i] > 0) {
                const double e = d.depth[i] - view.depth_gt->depth[i];
                abs_sum += std::abs(e);
                sq_sum += e * e;
                m.depth_pixels++;
            }
        }
        if (m.depth_pixels > 0) {
            m.depth_mae = abs_sum / static_cast<double>(m.depth_pixels);
            m.depth_rmse = std::sqrt(sq_sum / static_cast<double>(m.depth_pixels));
        }
    }
    return m;
}

struct EvalSummary {
    Metrics mean;
    std::vector<Metrics> per_view;
};

inline EvalSummary evaluate(const GaussianField& field, const NeuralColorState* neural,
                            const std::vector<View>& views, const RenderSettings& settings = {}) {
    EvalSummary s;
    for (const auto& v : views) s.per_view.push_back(evaluate_view(field, neural, v, settings));
    if (!s.per_view.empty()) {
        for (const auto& m : s.per_view) {
            s.mean.psnr += m.psnr;
            s.mean.ssim += m.ssim;
            s.mean.depth_mae += m.depth_mae;
            s.mean.depth_rmse += m.depth_rmse;
            s.mean.depth_pixels += m.depth_pixels;
        }
        const double n = static_cast<double>(s.per_view.size());
        s.mean.psnr /= n;
        s.mean.ssim /= n;
        s.mean.depth_mae /= n;
        s.mean.depth_rmse /= n;
    }
    return s;
}

}  // namespace dsplat
