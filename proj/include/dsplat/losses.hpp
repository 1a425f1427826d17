#pragma once

#include "dsplat/raster.hpp"

namespace dsplat {

struct LossWeights {
    double lambda = 0.2;  // D-SSIM weight in the color loss
    double gamma = 0.1;   // local-term weight in the depth regularization
    double delta = 0.05;  // L2 error tolerance, in normalized depth units
    double tau = 0.95;    // hard-depth constant opacity
};

// Non-overlapping p x p tiles in row-major order; right/bottom remainders
// become smaller ragged patches. Patches partition the pixel set.
struct PatchGrid {
    struct Rect {
        int x0, y0, w, h;
        int pixels() const { return w * h; }
    };
    int width = 0, height = 0, patch_size = 0;
    std::vector<Rect> patches;
    std::vector<int32_t> patch_of;  // pixel index -> patch index
};

inline PatchGrid partition(int width, int height, int p) {
    if (p < 2) throw ValidationError("partition: patch size must be >= 2");
    if (width <= 0 || height <= 0) throw ValidationError("partition: empty image");
    PatchGrid grid;
    grid.width = width;
    grid.height = height;
    grid.patch_size = p;
    grid.patch_of.assign(static_cast<size_t>(width) * height, -1);
    for (int y0 = 0; y0 < height; y0 += p) {
        for (int x0 = 0; x0 < width; x0 += p) {
            PatchGrid::Rect r{x0, y0, std::min(p, width - x0), std::min(p, height - y0)};
            const int32_t id = static_cast<int32_t>(grid.patches.size());
            for (int y = r.y0; y < r.y0 + r.h; ++y)
                for (int x = r.x0; x < r.x0 + r.w; ++x)
                    grid.patch_of[static_cast<size_t>(y) * width + x] = id;
            grid.patches.push_back(r);
        }
    }
    return grid;
}

enum class NormMode { Local, Global };

struct NormalizedDepth {
    int width = 0, height = 0;
    std::vector<double> values;
    NormMode mode = NormMode::Local;
};

namespace detail {

struct Moments {
    double mean = 0, std = 0;  // population standard deviation
};

inline Moments image_moments(const std::vector<double>& d) {
    Moments m;
    const double n = static_cast<double>(d.size());
    for (double x : d) m.mean += x;
    m.mean /= n;
    double ss = 0;
    for (double x : d) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / n);
    return m;
}

inline Moments patch_moments(const DepthMap& d, const PatchGrid::Rect& r) {
    Moments m;
    const double n = r.pixels();
    for (int y = r.y0; y < r.y0 + r.h; ++y)
        for (int x = r.x0; x < r.x0 + r.w; ++x) m.mean += d.depth[static_cast<size_t>(y) * d.width + x];
    m.mean /= n;
    double ss = 0;
    for (int y = r.y0; y < r.y0 + r.h; ++y)
        for (int x = r.x0; x < r.x0 + r.w; ++x) {
            const double e = d.depth[static_cast<size_t>(y) * d.width + x] - m.mean;
            ss += e * e;
        }
    m.std = std::sqrt(ss / n);
    return m;
}

inline void require_same_grid(const DepthMap& d, const PatchGrid& grid) {
    if (d.width != grid.width || d.height != grid.height)
        throw ValidationError("depth map and patch grid dimensions differ");
}

constexpr double kEpsRel = 1e-2;
constexpr double kEpsAbs = 1e-8;

}  // namespace detail

// Numerical-stability damping tied to the map's own scale, so both
// normalizations stay invariant under affine rescaling of the input.
inline double epsilon_for(const DepthMap& d) {
    return detail::kEpsRel * detail::image_moments(d.depth).std + detail::kEpsAbs;
}

// Per patch: (d - patch mean) / (patch std + eps). Patch mean 0 by
// construction, patch std near 1 where std >> eps.
inline NormalizedDepth normalize_local(const DepthMap& d, const PatchGrid& grid, double eps) {
    detail::require_same_grid(d, grid);
    NormalizedDepth out{d.width, d.height, std::vector<double>(d.pixel_count(), 0.0), NormMode::Local};
    for (const auto& r : grid.patches) {
        const auto m = detail::patch_moments(d, r);
        const double denom = m.std + eps;
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                out.values[i] = (d.depth[i] - m.mean) / denom;
            }
    }
    return out;
}

// Per patch mean, image-global standard deviation: keeps local structure
// while staying aware of the whole map's scale.
inline NormalizedDepth normalize_global(const DepthMap& d, const PatchGrid& grid) {
    detail::require_same_grid(d, grid);
    const double denom = detail::image_moments(d.depth).std + epsilon_for(d);
    NormalizedDepth out{d.width, d.height, std::vector<double>(d.pixel_count(), 0.0), NormMode::Global};
    for (const auto& r : grid.patches) {
        const auto m = detail::patch_moments(d, r);
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                out.values[i] = (d.depth[i] - m.mean) / denom;
            }
    }
    return out;
}

// Cotangent of normalize_local with respect to the input map. The chain
// includes the patch mean, the patch std, and the image std inside eps.
inline std::vector<double> normalize_local_vjp(const DepthMap& d, const PatchGrid& grid,
                                               const std::vector<double>& upstream) {
    detail::require_same_grid(d, grid);
    const auto im = detail::image_moments(d.depth);
    const double eps = detail::kEpsRel * im.std + detail::kEpsAbs;
    const double n_img = static_cast<double>(d.pixel_count());
    std::vector<double> grad(d.pixel_count(), 0.0);
    double b_total = 0;  // sum over pixels of u * N / D^2, feeds the eps path
    for (const auto& r : grid.patches) {
        const auto m = detail::patch_moments(d, r);
        const double denom = m.std + eps;
        const double np = r.pixels();
        double a_sum = 0, b_sum = 0;
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                a_sum += upstream[i];
                b_sum += upstream[i] * (d.depth[i] - m.mean);
            }
        const double b_scaled = b_sum / (denom * denom);
        b_total += b_scaled;
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                grad[i] += upstream[i] / denom - a_sum / (np * denom);
                if (m.std > 0)
                    grad[i] -= b_scaled * (d.depth[i] - m.mean) / (np * m.std);
            }
    }
    if (im.std > 0) {
        for (size_t i = 0; i < grad.size(); ++i)
            grad[i] -= detail::kEpsRel * b_total * (d.depth[i] - im.mean) / (n_img * im.std);
    }
    return grad;
}

inline std::vector<double> normalize_global_vjp(const DepthMap& d, const PatchGrid& grid,
                                                const std::vector<double>& upstream) {
    detail::require_same_grid(d, grid);
    const auto im = detail::image_moments(d.depth);
    const double denom = im.std * (1.0 + detail::kEpsRel) + detail::kEpsAbs;
    const double n_img = static_cast<double>(d.pixel_count());
    std::vector<double> grad(d.pixel_count(), 0.0);
    double b_total = 0;
    for (const auto& r : grid.patches) {
        const auto m = detail::patch_moments(d, r);
        const double np = r.pixels();
        double a_sum = 0;
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                a_sum += upstream[i];
                b_total += upstream[i] * (d.depth[i] - m.mean);
            }
        for (int y = r.y0; y < r.y0 + r.h; ++y)
            for (int x = r.x0; x < r.x0 + r.w; ++x) {
                const size_t i = static_cast<size_t>(y) * d.width + x;
                grad[i] += upstream[i] / denom - a_sum / (np * denom);
            }
    }
    if (im.std > 0) {
        const double k = (1.0 + detail::kEpsRel) * b_total / (denom * denom);
        for (size_t i = 0; i < grad.size(); ++i)
            grad[i] -= k * (d.depth[i] - im.mean) / (n_img * im.std);
    }
    return grad;
}

// Mean over pixels of max(|a - b| - delta, 0)^2. The hinge keeps the
// gradient continuous at the tolerance boundary.
inline double tolerant_l2(const NormalizedDepth& a, const NormalizedDepth& b, double delta) {
    if (a.mode != b.mode) throw ValidationError("tolerant_l2: normalization mode mismatch");
    if (a.values.size() != b.values.size() || a.width != b.width)
        throw ValidationError("tolerant_l2: dimension mismatch");
    double sum = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        const double h = std::max(std::abs(a.values[i] - b.values[i]) - delta, 0.0);
        sum += h * h;
    }
    return sum / static_cast<double>(a.values.size());
}

inline std::vector<double> tolerant_l2_grad_a(const NormalizedDepth& a, const NormalizedDepth& b,
                                              double delta) {
    if (a.mode != b.mode) throw ValidationError("tolerant_l2: normalization mode mismatch");
    std::vector<double> grad(a.values.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(a.values.size());
    for (size_t i = 0; i < a.values.size(); ++i) {
        const double e = a.values[i] - b.values[i];
        const double h = std::max(std::abs(e) - delta, 0.0);
        grad[i] = 2.0 * h * (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0)) * inv_n;
    }
    return grad;
}

// Global + gamma * local tolerant-L2 between the rendered and the reference
// depth map, each normalized with its own statistics. The reference map is
// treated as constant.
inline double depth_regularization(const DepthMap& rendered, const DepthMap& reference,
                                   const PatchGrid& grid, const LossWeights& w) {
    if (rendered.width != reference.width || rendered.height != reference.height)
        throw ValidationError("depth_regularization: dimension mismatch");
    const auto gn_r = normalize_global(rendered, grid);
    const auto gn_m = normalize_global(reference, grid);
    const auto ln_r = normalize_local(rendered, grid, epsilon_for(rendered));
    const auto ln_m = normalize_local(reference, grid, epsilon_for(reference));
    return tolerant_l2(gn_r, gn_m, w.delta) + w.gamma * tolerant_l2(ln_r, ln_m, w.delta);
}

// d(depth_regularization)/d(rendered depth), per pixel.
inline std::vector<double> depth_regularization_vjp(const DepthMap& rendered,
                                                    const DepthMap& reference,
                                                    const PatchGrid& grid, const LossWeights& w) {
    if (rendered.width != reference.width || rendered.height != reference.height)
        throw ValidationError("depth_regularization: dimension mismatch");
    const auto gn_r = normalize_global(rendered, grid);
    const auto gn_m = normalize_global(reference, grid);
    const auto ln_r = normalize_local(rendered, grid, epsilon_for(rendered));
    const auto ln_m = normalize_local(reference, grid, epsilon_for(reference));

    const auto u_gn = tolerant_l2_grad_a(gn_r, gn_m, w.delta);
    auto u_ln = tolerant_l2_grad_a(ln_r, ln_m, w.delta);
    for (auto& v : u_ln) v *= w.gamma;

    auto grad = normalize_global_vjp(rendered, grid, u_gn);
    const auto g2 = normalize_local_vjp(rendered, grid, u_ln);
    for (size_t i = 0; i < grad.size(); ++i) grad[i] += g2[i];
    return grad;
}

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    const double c = (size - 1) / 2.0;
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Valid-mode separable correlation of one channel with a normalized kernel.
inline std::vector<double> filter_valid(const std::vector<double>& img, int w, int h,
                                        const std::vector<double>& k) {
    const int ks = static_cast<int>(k.size());
    const int ow = w - ks + 1, oh = h - ks + 1;
    std::vector<double> tmp(static_cast<size_t>(ow) * h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < ks; ++i) s += k[i] * img[static_cast<size_t>(y) * w + x + i];
            tmp[static_cast<size_t>(y) * ow + x] = s;
        }
    std::vector<double> out(static_cast<size_t>(ow) * oh, 0.0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < ks; ++i) s += k[i] * tmp[static_cast<size_t>(y + i) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = s;
        }
    return out;
}

constexpr double kSsimK1 = 0.01;
constexpr double kSsimK2 = 0.03;
constexpr double kSsimRange = 1.0;

inline int ssim_window(int width, int height) {
    int win = 11;
    const int m = std::min(width, height);
    if (m < win) win = (m % 2 == 1) ? m : m - 1;
    if (win < 3) throw ValidationError("ssim: image too small for a 3x3 window");
    return win;
}

}  // namespace detail

// Mean structural similarity over valid window positions, Gaussian window
// (11x11, sigma 1.5), channel-averaged, dynamic range 1.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.width != b.width || a.height != b.height) throw ValidationError("ssim: dimension mismatch");
    const int win = detail::ssim_window(a.width, a.height);
    const auto kernel = detail::gaussian_kernel(win, 1.5);
    const double c1 = detail::kSsimK1 * detail::kSsimRange * detail::kSsimK1 * detail::kSsimRange;
    const double c2 = detail::kSsimK2 * detail::kSsimRange * detail::kSsimK2 * detail::kSsimRange;

    const size_t n = a.pixel_count();
    std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
    double total = 0;
    for (int ch = 0; ch < 3; ++ch) {
        for (size_t i = 0; i < n; ++i) {
            xa[i] = a.rgb[i * 3 + ch];
            xb[i] = b.rgb[i * 3 + ch];
            xaa[i] = xa[i] * xa[i];
            xbb[i] = xb[i] * xb[i];
            xab[i] = xa[i] * xb[i];
        }
        const auto mu_a = detail::filter_valid(xa, a.width, a.height, kernel);
        const auto mu_b = detail::filter_valid(xb, a.width, a.height, kernel);
        const auto m_aa = detail::filter_valid(xaa, a.width, a.height, kernel);
        const auto m_bb = detail::filter_valid(xbb, a.width, a.height, kernel);
        const auto m_ab = detail::filter_valid(xab, a.width, a.height, kernel);
        double s = 0;
        for (size_t i = 0; i < mu_a.size(); ++i) {
            const double va = m_aa[i] - mu_a[i] * mu_a[i];
            const double vb = m_bb[i] - mu_b[i] * mu_b[i];
            const double vab = m_ab[i] - mu_a[i] * mu_b[i];
            const double a1 = 2 * mu_a[i] * mu_b[i] + c1;
            const double a2 = 2 * vab + c2;
            const double b1 = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1;
            const double b2 = va + vb + c2;
            s += (a1 * a2) / (b1 * b2);
        }
        total += s / static_cast<double>(mu_a.size());
    }
    return total / 3.0;
}

// upstream * dSSIM(a, b)/da, scattered back through the window statistics.
inline std::vector<double> ssim_vjp(const ImageBuffer& a, const ImageBuffer& b, double upstream) {
    if (a.width != b.width || a.height != b.height) throw ValidationError("ssim: dimension mismatch");
    const int win = detail::ssim_window(a.width, a.height);
    const auto kernel = detail::gaussian_kernel(win, 1.5);
    const double c1 = detail::kSsimK1 * detail::kSsimK1;
    const double c2 = detail::kSsimK2 * detail::kSsimK2;
    const int ow = a.width - win + 1, oh = a.height - win + 1;
    const double scale = upstream / (3.0 * ow * oh);

    std::vector<double> grad(a.rgb.size(), 0.0);
    const size_t n = a.pixel_count();
    std::vector<double> xa(n), xb(n), xaa(n), xbb(n), xab(n);
    for (int ch = 0; ch < 3; ++ch) {
        for (size_t i = 0; i < n; ++i) {
            xa[i] = a.rgb[i * 3 + ch];
            xb[i] = b.rgb[i * 3 + ch];
            xaa[i] = xa[i] * xa[i];
            xbb[i] = xb[i] * xb[i];
            xab[i] = xa[i] * xb[i];
        }
        const auto mu_a = detail::filter_valid(xa, a.width, a.height, kernel);
        const auto mu_b = detail::filter_valid(xb, a.width, a.height, kernel);
        const auto m_aa = detail::filter_valid(xaa, a.width, a.height, kernel);
        const auto m_bb = detail::filter_valid(xbb, a.width, a.height, kernel);
        const auto m_ab = detail::filter_valid(xab, a.width, a.height, kernel);
        for (int wy = 0; wy < oh; ++wy) {
            for (int wx = 0; wx < ow; ++wx) {
                const size_t wi = static_cast<size_t>(wy) * ow + wx;
                const double va = m_aa[wi] - mu_a[wi] * mu_a[wi];
                const double vb = m_bb[wi] - mu_b[wi] * mu_b[wi];
                const double vab = m_ab[wi] - mu_a[wi] * mu_b[wi];
                const double a1 = 2 * mu_a[wi] * mu_b[wi] + c1;
                const double a2 = 2 * vab + c2;
                const double b1 = mu_a[wi] * mu_a[wi] + mu_b[wi] * mu_b[wi] + c1;
                const double b2 = va + vb + c2;
                const double ds_dmu = (2 * mu_b[wi] * b1 - 2 * mu_a[wi] * a1) / (b1 * b1) * (a2 / b2);
                const double ds_dva = -(a1 * a2) / (b1 * b2 * b2);
                const double ds_dvab = (a1 / b1) * (2.0 / b2);
                for (int ky = 0; ky < win; ++ky) {
                    for (int kx = 0; kx < win; ++kx) {
                        const double g = kernel[kx] * kernel[ky];
                        const size_t pi = static_cast<size_t>(wy + ky) * a.width + (wx + kx);
                        const double d = ds_dmu + ds_dva * 2 * (xa[pi] - mu_a[wi]) +
                                         ds_dvab * (xb[pi] - mu_b[wi]);
                        grad[pi * 3 + ch] += scale * g * d;
                    }
                }
            }
        }
    }
    return grad;
}

// L1 + lambda * (1 - SSIM).
inline double color_loss(const ImageBuffer& rendered, const ImageBuffer& gt, double lambda) {
    if (rendered.rgb.size() != gt.rgb.size() || rendered.width != gt.width)
        throw ValidationError("color_loss: dimension mismatch");
    double l1 = 0;
    for (size_t i = 0; i < rendered.rgb.size(); ++i) l1 += std::abs(rendered.rgb[i] - gt.rgb[i]);
    l1 /= static_cast<double>(rendered.rgb.size());
    return lambda == 0.0 ? l1 : l1 + lambda * (1.0 - ssim(rendered, gt));
}

inline std::vector<double> color_loss_vjp(const ImageBuffer& rendered, const ImageBuffer& gt,
                                          double lambda) {
    if (rendered.rgb.size() != gt.rgb.size() || rendered.width != gt.width)
        throw ValidationError("color_loss: dimension mismatch");
    std::vector<double> grad(rendered.rgb.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(rendered.rgb.size());
    for (size_t i = 0; i < grad.size(); ++i) {
        const double e = rendered.rgb[i] - gt.rgb[i];
        grad[i] = (e > 0 ? inv_n : (e < 0 ? -inv_n : 0.0));
    }
    if (lambda != 0.0) {
        const auto g = ssim_vjp(rendered, gt, -lambda);
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    }
    return grad;
}

// Unit-weight sum of the three objective terms; the component weighting
// lives inside gamma, delta, tau, and lambda.
inline double total_loss(double color, double r_hard, double r_soft) {
    return color + r_hard + r_soft;
}

}  // namespace dsplat
