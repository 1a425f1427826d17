#pragma once

#include "dsplat/color.hpp"
#include "dsplat/losses.hpp"
#include "dsplat/raster.hpp"

namespace dsplat {

// Reverse-mode gradients for one render, grouped per parameter. Frozen
// groups are identically zero buffers. screen_pos carries the accumulated
// 2D mean cotangents that drive densification.
struct ParamGrads {
    std::vector<Vec3> center;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    std::vector<double> opacity_logit;
    std::vector<Eigen::VectorXd> color_params;  // SH mode, K per primitive
    NeuralGrads neural;                          // neural mode
    std::vector<Vec2> screen_pos;
    std::vector<uint8_t> visible;

    explicit ParamGrads(size_t n = 0, int feature_dim = 0)
        : center(n, Vec3::Zero()),
          log_scale(n, Vec3::Zero()),
          rotation(n, Vec4::Zero()),
          opacity_logit(n, 0.0),
          color_params(n, Eigen::VectorXd::Zero(feature_dim)),
          screen_pos(n, Vec2::Zero()),
          visible(n, 0) {}

    void add_scaled(const ParamGrads& o, double s) {
        for (size_t i = 0; i < center.size(); ++i) {
            center[i] += s * o.center[i];
            log_scale[i] += s * o.log_scale[i];
            rotation[i] += s * o.rotation[i];
            opacity_logit[i] += s * o.opacity_logit[i];
            if (color_params[i].size()) color_params[i] += s * o.color_params[i];
        }
        for (const auto& [k, v] : o.neural.table) neural.table[k] += s * v;
        if (!o.neural.stage_a.empty()) {
            if (neural.stage_a.empty()) {
                neural.stage_a.assign(o.neural.stage_a.size(), 0.0);
                neural.stage_b.assign(o.neural.stage_b.size(), 0.0);
            }
            for (size_t i = 0; i < o.neural.stage_a.size(); ++i) neural.stage_a[i] += s * o.neural.stage_a[i];
            for (size_t i = 0; i < o.neural.stage_b.size(); ++i) neural.stage_b[i] += s * o.neural.stage_b[i];
        }
        if (!o.neural.center.empty()) {
            for (size_t i = 0; i < center.size(); ++i) center[i] += s * o.neural.center[i];
        }
    }
};

namespace detail {

// Cotangent accumulators for one sorted slot, summed over pixels.
struct SlotCots {
    Vec2 mean2d = Vec2::Zero();
    Mat2 conic = Mat2::Zero();
    double dist = 0;
    double alpha = 0;
    Vec3 color = Vec3::Zero();
};

// Backward through the front-to-back compositing of a single pixel,
// replaying exactly the terms the forward pass processed.
template <typename SlotRange>
inline void pixel_backward(const RenderKind& kind, const SlotRange& slots,
                           const std::vector<Projected2D>& proj,
                           const std::vector<double>& opacities, const std::vector<Vec3>* colors,
                           const std::vector<int32_t>& prim_of, const Vec2& pixel,
                           const RenderSettings& s, const Vec3& upstream_rgb, double upstream_scalar,
                           std::vector<SlotCots>& cots) {
    struct Term {
        int32_t slot;
        double w, alpha, trans;
    };
    thread_local std::vector<Term> terms;
    terms.clear();

    if (kind.tag == RenderKind::Tag::HardDepth) {
        double atten = 1.0;
        for (int32_t slot : slots) {
            const double w = gaussian_weight(proj[slot], pixel);
            if (w == 0.0) continue;
            auto& c = cots[slot];
            const double k = upstream_scalar * kind.tau * atten;
            c.dist += k * w;
            const double wbar = k * proj[slot].dist;
            const Vec2 d = pixel - proj[slot].mean2d;
            const Vec2 cd = proj[slot].conic * d;
            c.mean2d += wbar * w * cd;
            c.conic += (-0.5 * wbar * w) * (d * d.transpose());
            atten *= (1.0 - kind.tau);
        }
        return;
    }

    double transmittance = 1.0;
    for (int32_t slot : slots) {
        if (transmittance < s.min_transmittance) break;
        const double w = gaussian_weight(proj[slot], pixel);
        if (w == 0.0) continue;
        const double alpha = std::min(opacities[prim_of[slot]] * w, s.alpha_clamp);
        if (alpha < s.alpha_skip) continue;
        terms.push_back({slot, w, alpha, transmittance});
        transmittance *= (1.0 - alpha);
    }

    const bool is_color = kind.tag == RenderKind::Tag::Color;
    double suffix = is_color ? upstream_rgb.dot(s.background) * transmittance : 0.0;
    for (size_t t = terms.size(); t-- > 0;) {
        const auto& term = terms[t];
        auto& c = cots[term.slot];
        const double uv = is_color ? upstream_rgb.dot((*colors)[prim_of[term.slot]])
                                   : upstream_scalar * proj[term.slot].dist;
        const double abar = uv * term.trans - suffix / (1.0 - term.alpha);
        suffix += uv * term.alpha * term.trans;

        if (is_color) {
            c.color += upstream_rgb * (term.alpha * term.trans);
        } else {
            c.dist += upstream_scalar * term.alpha * term.trans;
        }
        // The clamp is flat: no gradient once alpha saturates.
        if (opacities[prim_of[term.slot]] * term.w >= s.alpha_clamp) continue;
        c.alpha += abar * term.w;
        const double wbar = abar * opacities[prim_of[term.slot]];
        const Vec2 d = pixel - proj[term.slot].mean2d;
        const Vec2 cd = proj[term.slot].conic * d;
        c.mean2d += wbar * term.w * cd;
        c.conic += (-0.5 * wbar * term.w) * (d * d.transpose());
    }
}

// d(rotation matrix)/d(unit quaternion component).
inline Mat3 rotation_partial(const Vec4& q, int comp) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 m;
    switch (comp) {
        case 0: m << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0; break;
        case 1: m << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x; break;
        case 2: m << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y; break;
        default: m << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0; break;
    }
    return m;
}

}  // namespace detail

// Flattened forward render used by the gradient checker: color kinds yield
// interleaved rgb (3 per pixel), depth kinds the depth plane.
inline std::vector<double> render_flat(const RenderKind& kind, const GaussianField& field,
                                       const NeuralColorState* neural, const Camera& cam,
                                       const RenderSettings& settings = {}) {
    switch (kind.tag) {
        case RenderKind::Tag::Color: {
            const auto colors = compute_colors(field, neural, cam);
            return render_color(field, cam, colors, settings).rgb;
        }
        case RenderKind::Tag::HardDepth:
            return render_hard_depth(field, cam, kind.tau, settings).depth;
        case RenderKind::Tag::SoftDepth:
            return render_soft_depth(field, cam, settings).depth;
        default:
            return render_depth(field, cam, settings).depth;
    }
}

// Exact reverse-mode gradients of <upstream, render(kind)> for the unfrozen
// parameter groups. Hard depth never reads the learned opacity, so its
// opacity gradient is structurally zero; soft depth detaches center, scale,
// and rotation everywhere, reaching opacity alone.
inline ParamGrads vjp_render(const RenderKind& kind, const GaussianField& field,
                             const NeuralColorState* neural, const Camera& cam,
                             const std::vector<double>& upstream, const FreezeMask& mask = {},
                             const RenderSettings& settings = {}) {
    const size_t npix = static_cast<size_t>(cam.width) * cam.height;
    const bool is_color = kind.tag == RenderKind::Tag::Color;
    if (upstream.size() != (is_color ? npix * 3 : npix))
        throw ValidationError("vjp_render: upstream dimensions do not match the render output");

    FreezeMask eff = mask;
    if (kind.tag == RenderKind::Tag::SoftDepth) eff.center = eff.scale = eff.rotation = true;
    if (kind.tag == RenderKind::Tag::HardDepth) eff.opacity = true;

    const FrameGeometry frame = prepare_frame(field, cam);
    const auto opac = detail::activated_opacities(field);
    std::vector<Vec3> colors;
    if (is_color) colors = compute_colors(field, neural, cam);

    // Pixel loop in fixed order; accumulation is serial so results do not
    // depend on worker count.
    std::vector<detail::SlotCots> cots(frame.proj.size());
    const auto effective_kind = kind.tag == RenderKind::Tag::SoftDepth ? RenderKind::depth() : kind;
    for (size_t pix = 0; pix < npix; ++pix) {
        const Vec2 pixel(static_cast<double>(pix % cam.width), static_cast<double>(pix / cam.width));
        Vec3 up_rgb = Vec3::Zero();
        double up_s = 0;
        if (is_color)
            up_rgb = Vec3(upstream[pix * 3], upstream[pix * 3 + 1], upstream[pix * 3 + 2]);
        else
            up_s = upstream[pix];
        if (is_color ? up_rgb.isZero(0.0) : up_s == 0.0) continue;
        const detail::SlotSpan span{frame.pixel_begin(pix), frame.pixel_end(pix)};
        detail::pixel_backward(effective_kind, span, frame.proj, opac, is_color ? &colors : nullptr,
                               frame.prim_of, pixel, settings, up_rgb, up_s, cots);
    }

    ParamGrads grads(field.size(), field.feature_dim());
    std::vector<Vec3> color_cots;
    if (is_color) color_cots.assign(field.size(), Vec3::Zero());

    const Vec3 origin = cam.center();
    const Mat3 w_rot = cam.rotation;
    for (size_t s = 0; s < frame.proj.size(); ++s) {
        const int32_t pi = frame.prim_of[s];
        const auto& prim = field.primitives[pi];
        const auto& p2 = frame.proj[s];
        const auto& c = cots[s];
        grads.visible[pi] = 1;
        grads.screen_pos[pi] += c.mean2d;
        if (is_color) color_cots[pi] += c.color;

        if (!eff.opacity && c.alpha != 0.0) {
            const double a = opac[pi];
            grads.opacity_logit[pi] += c.alpha * a * (1.0 - a);
        }

        const bool need_geom = !eff.center || !eff.scale || !eff.rotation;
        if (!need_geom) continue;

        const Vec3 pcam = cam.to_camera(prim.center);
        Vec3 pbar = Vec3::Zero();

        // conic -> dilated cov -> cov2d -> (Sigma, J).
        Mat2 cov_bar = Mat2::Zero();
        if (!c.conic.isZero(0.0)) {
            cov_bar = -(p2.conic * c.conic * p2.conic);
        }
        Eigen::Matrix<double, 2, 3> jac;
        jac << cam.fx / pcam.z(), 0, -cam.fx * pcam.x() / (pcam.z() * pcam.z()),
               0, cam.fy / pcam.z(), -cam.fy * pcam.y() / (pcam.z() * pcam.z());
        const Eigen::Matrix<double, 2, 3> t = jac * w_rot;
        const Mat3 sigma = covariance_from(prim.log_scale, prim.rotation);

        if (!cov_bar.isZero(0.0)) {
            if (!eff.scale || !eff.rotation) {
                const Mat3 sigma_bar = t.transpose() * cov_bar * t;
                const double qnorm = prim.rotation.norm();
                const Vec4 qhat = prim.rotation / qnorm;
                const Mat3 rot = rotation_from_quaternion(qhat);
                const Vec3 scale = prim.scale();
                const Mat3 m = rot * scale.asDiagonal();
                const Mat3 m_bar = 2.0 * sigma_bar * m;
                if (!eff.scale) {
                    const Vec3 s_bar = (rot.transpose() * m_bar).diagonal();
                    grads.log_scale[pi] += s_bar.cwiseProduct(scale);
                }
                if (!eff.rotation) {
                    const Mat3 r_bar = m_bar * scale.asDiagonal();
                    Vec4 qhat_bar;
                    for (int comp = 0; comp < 4; ++comp)
                        qhat_bar[comp] = (r_bar.array() * detail::rotation_partial(qhat, comp).array()).sum();
                    grads.rotation[pi] += (qhat_bar - qhat * qhat.dot(qhat_bar)) / qnorm;
                }
            }
            if (!eff.center) {
                // cov2d depends on p through the pinhole Jacobian.
                const Eigen::Matrix<double, 2, 3> t_bar = (cov_bar + cov_bar.transpose()) * t * sigma;
                const Eigen::Matrix<double, 2, 3> j_bar = t_bar * w_rot.transpose();
                const double z2 = pcam.z() * pcam.z(), z3 = z2 * pcam.z();
                pbar.x() += j_bar(0, 2) * (-cam.fx / z2);
                pbar.y() += j_bar(1, 2) * (-cam.fy / z2);
                pbar.z() += j_bar(0, 0) * (-cam.fx / z2) + j_bar(1, 1) * (-cam.fy / z2) +
                            j_bar(0, 2) * (2 * cam.fx * pcam.x() / z3) +
                            j_bar(1, 2) * (2 * cam.fy * pcam.y() / z3);
            }
        }

        if (!eff.center) {
            pbar.x() += c.mean2d.x() * cam.fx / pcam.z();
            pbar.y() += c.mean2d.y() * cam.fy / pcam.z();
            pbar.z() += -(c.mean2d.x() * cam.fx * pcam.x() + c.mean2d.y() * cam.fy * pcam.y()) /
                        (pcam.z() * pcam.z());
            grads.center[pi] += w_rot.transpose() * pbar;
            if (c.dist != 0.0) grads.center[pi] += c.dist * (prim.center - origin) / p2.dist;
        }
    }

    // Color feature path: SH coefficients or the neural renderer, with the
    // direction/position chain feeding back into the centers.
    if (is_color && !eff.color) {
        if (field.color_mode == ColorMode::Sh) {
            for (size_t i = 0; i < field.size(); ++i) {
                if (color_cots[i].isZero(0.0)) continue;
                const Vec3 rel = field.primitives[i].center - origin;
                const double r = rel.norm();
                const Vec3 dir = rel / r;
                const auto g = sh_eval_vjp(field.primitives[i].color_params, field.sh_degree, dir,
                                           color_cots[i]);
                grads.color_params[i] += g.coeffs;
                if (!eff.center) grads.center[i] += (g.dir - dir * dir.dot(g.dir)) / r;
            }
        } else {
            if (!neural) throw ValidationError("vjp_render: neural state required");
            grads.neural = neural_color_vjp(field, *neural, cam, color_cots);
            if (!eff.center) {
                for (size_t i = 0; i < field.size(); ++i) grads.center[i] += grads.neural.center[i];
            }
            grads.neural.center.clear();
        }
    }

    // Frozen groups are identically zero, not merely small.
    if (eff.center)
        std::fill(grads.center.begin(), grads.center.end(), Vec3::Zero());
    if (eff.scale)
        std::fill(grads.log_scale.begin(), grads.log_scale.end(), Vec3::Zero());
    if (eff.rotation)
        std::fill(grads.rotation.begin(), grads.rotation.end(), Vec4::Zero());
    if (eff.opacity)
        std::fill(grads.opacity_logit.begin(), grads.opacity_logit.end(), 0.0);
    if (eff.color) {
        for (auto& cp : grads.color_params) cp.setZero();
        grads.neural = NeuralGrads{};
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------

struct GradCheckReport {
    struct Group {
        std::string name;
        double max_abs_err = 0;
        double max_rel_err = 0;
        size_t checked = 0;
        size_t skipped = 0;  // parameters straddling a non-smooth point
    };
    std::vector<Group> groups;
    double h = 0;

    size_t total_checked() const {
        size_t n = 0;
        for (const auto& g : groups) n += g.checked;
        return n;
    }
    size_t total_skipped() const {
        size_t n = 0;
        for (const auto& g : groups) n += g.skipped;
        return n;
    }

    bool pass(double rel_tol, double abs_tol) const {
        for (const auto& g : groups) {
            if (g.max_abs_err > abs_tol && g.max_rel_err > rel_tol) return false;
        }
        return true;
    }
    double worst_rel() const {
        double w = 0;
        for (const auto& g : groups) w = std::max(w, g.max_rel_err);
        return w;
    }
};

// Scalar loss of a flattened render, with its exact gradient.
struct PixelLoss {
    virtual ~PixelLoss() = default;
    virtual double value(const std::vector<double>& out) const = 0;
    virtual std::vector<double> grad(const std::vector<double>& out) const = 0;
};

// Fixed pseudo-random weighting; avoids the cancellations a plain sum hides.
struct WeightedSumLoss : PixelLoss {
    std::vector<double> w;
    WeightedSumLoss(size_t n, uint64_t seed) : w(n) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.25, 1.0);
        for (auto& v : w) v = u(rng);
    }
    double value(const std::vector<double>& out) const override {
        double s = 0;
        for (size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
        return s;
    }
    std::vector<double> grad(const std::vector<double>& out) const override {
        (void)out;
        return w;
    }
};

namespace detail {

struct ScalarSlot {
    int group;  // index into GradCheckReport::groups
    std::function<double&()> ref;
    std::function<double()> analytic;
};

// Central differences at two step sizes. The renders have isolated
// non-smooth points (support-radius cutoff, opacity clamp and skip); a
// parameter whose probe interval straddles one makes the two estimates
// disagree wildly, and is excluded from the comparison rather than scored.
// A wrong analytic gradient still fails: away from kinks both estimates
// agree with each other and expose it.
template <typename Eval>
inline void fd_compare(GradCheckReport& report, std::vector<ScalarSlot>& slots, double h,
                       const Eval& eval) {
    for (auto& slot : slots) {
        double& x = slot.ref();
        const double saved = x;
        const auto probe = [&](double step) {
            x = saved + step;
            const double fp = eval();
            x = saved - step;
            const double fm = eval();
            x = saved;
            return (fp - fm) / (2 * step);
        };
        const double fd = probe(h);
        const double fd_half = probe(0.5 * h);
        auto& g = report.groups[slot.group];
        if (std::abs(fd - fd_half) > 1e-3 * std::max(std::abs(fd), std::abs(fd_half)) + 5e-8) {
            g.skipped++;
            continue;
        }
        const double an = slot.analytic();
        const double abs_err = std::abs(fd - an);
        const double denom = std::max(std::abs(fd), std::abs(an));
        g.max_abs_err = std::max(g.max_abs_err, abs_err);
        if (denom > 1e-12) g.max_rel_err = std::max(g.max_rel_err, abs_err / denom);
        g.checked++;
    }
}

}  // namespace detail

// Central-difference check of vjp_render against the analytic gradients for
// every (unfrozen) scalar parameter, including neural tables and weights.
inline GradCheckReport finite_diff_check(GaussianField field, NeuralColorState* neural,
                                         const Camera& cam, const RenderKind& kind,
                                         const PixelLoss& loss, double h,
                                         const FreezeMask& mask = {},
                                         const RenderSettings& settings = {}) {
    if (!(h > 0)) throw ValidationError("finite_diff_check: h must be positive");
    GradCheckReport report;
    report.h = h;

    const auto out0 = render_flat(kind, field, neural, cam, settings);
    const auto upstream = loss.grad(out0);
    const ParamGrads grads = vjp_render(kind, field, neural, cam, upstream, mask, settings);

    auto eval = [&]() {
        if (neural) neural->invalidate();
        return loss.value(render_flat(kind, field, neural, cam, settings));
    };

    std::vector<detail::ScalarSlot> slots;
    auto add_group = [&](const std::string& name) {
        report.groups.push_back({name, 0, 0, 0});
        return static_cast<int>(report.groups.size()) - 1;
    };

    // Soft depth detaches center/scale/rotation: the forward still moves
    // under those parameters, so central differences are only meaningful for
    // the opacity group (the detached groups are exact-zero by contract).
    const bool geom_live = kind.tag != RenderKind::Tag::SoftDepth;
    if (geom_live) {
        const int g_center = add_group("center");
        const int g_scale = add_group("log_scale");
        const int g_rot = add_group("rotation");
        for (size_t i = 0; i < field.size(); ++i) {
            for (int a = 0; a < 3; ++a) {
                slots.push_back({g_center, [&field, i, a]() -> double& { return field.primitives[i].center[a]; },
                                 [&grads, i, a]() { return grads.center[i][a]; }});
                slots.push_back({g_scale, [&field, i, a]() -> double& { return field.primitives[i].log_scale[a]; },
                                 [&grads, i, a]() { return grads.log_scale[i][a]; }});
            }
            for (int a = 0; a < 4; ++a)
                slots.push_back({g_rot, [&field, i, a]() -> double& { return field.primitives[i].rotation[a]; },
                                 [&grads, i, a]() { return grads.rotation[i][a]; }});
        }
    }
    const int g_opac = add_group("opacity");
    for (size_t i = 0; i < field.size(); ++i)
        slots.push_back({g_opac, [&field, i]() -> double& { return field.primitives[i].opacity_logit; },
                         [&grads, i]() { return grads.opacity_logit[i]; }});
    if (kind.tag == RenderKind::Tag::Color && field.color_mode == ColorMode::Sh) {
        const int g_color = add_group("color");
        for (size_t i = 0; i < field.size(); ++i)
            for (int k = 0; k < field.feature_dim(); ++k)
                slots.push_back({g_color, [&field, i, k]() -> double& { return field.primitives[i].color_params[k]; },
                                 [&grads, i, k]() { return grads.color_params[i][k]; }});
    }
    if (kind.tag == RenderKind::Tag::Color && field.color_mode == ColorMode::Neural && neural) {
        const int g_table = add_group("hash_table");
        for (const auto& [idx, g] : grads.neural.table) {
            slots.push_back({g_table, [neural, idx = idx]() -> double& { return neural->table_ref(idx); },
                             [&grads, idx = idx]() { return grads.neural.table.at(idx); }});
        }
        const int g_a = add_group("mlp_stage_a");
        for (size_t i = 0; i < neural->stage_a.weights.size(); ++i)
            slots.push_back({g_a, [neural, i]() -> double& { return neural->stage_a.weights[i]; },
                             [&grads, i]() { return grads.neural.stage_a[i]; }});
        const int g_b = add_group("mlp_stage_b");
        for (size_t i = 0; i < neural->stage_b.weights.size(); ++i)
            slots.push_back({g_b, [neural, i]() -> double& { return neural->stage_b.weights[i]; },
                             [&grads, i]() { return grads.neural.stage_b[i]; }});
    }

    detail::fd_compare(report, slots, h, eval);
    return report;
}

}  // namespace dsplat
