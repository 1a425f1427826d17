#pragma once

#include "dsplat/common.hpp"

#include <optional>

namespace dsplat {

// Anti-aliasing dilation added to the projected covariance before inversion,
// in pixel^2. Keeps conics of sub-pixel Gaussians well conditioned.
constexpr double kCovDilation = 0.3;

// Support cutoff, in standard deviations of the largest 2D eigenvalue.
constexpr double kSupportSigma = 3.0;

enum class ColorMode { Sh, Neural };

// One anisotropic 3D Gaussian. Scales live in log space and opacity as a
// logit so the optimizer is unconstrained; activations are exp and sigmoid.
struct GaussianPrimitive {
    Vec3 center = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);  // quaternion (w, x, y, z), renormalized on use
    double opacity_logit = 0.0;
    Eigen::VectorXd color_params;  // SH coefficients (K = 3*(deg+1)^2); empty in neural mode

    Vec3 scale() const { return log_scale.array().exp(); }
    double opacity() const { return sigmoid(opacity_logit); }
};

struct GaussianField {
    std::vector<GaussianPrimitive> primitives;
    ColorMode color_mode = ColorMode::Sh;
    int sh_degree = 3;

    size_t size() const { return primitives.size(); }
    int feature_dim() const {
        return color_mode == ColorMode::Sh ? 3 * (sh_degree + 1) * (sh_degree + 1) : 0;
    }
};

// Pinhole camera, world-to-camera pose, camera looks down +z in camera space.
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3 rotation = Mat3::Identity();  // R_wc
    Vec3 translation = Vec3::Zero();   // t_wc
    double z_near = 1e-2;

    Vec3 center() const { return -rotation.transpose() * translation; }
    Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
};

// Screen-space footprint of one projected primitive.
struct Projected2D {
    Vec2 mean2d = Vec2::Zero();   // pixels
    Mat2 cov2d = Mat2::Zero();    // pixels^2, undilated
    Mat2 conic = Mat2::Zero();    // inverse of (cov2d + dilation * I)
    double view_z = 0;            // camera-space depth
    double dist = 0;              // ||center - camera center||
    double radius = 0;            // support cutoff in pixels
};

// Per-parameter-group gradient gate. true = frozen (gradient forced to zero).
struct FreezeMask {
    bool center = false;
    bool scale = false;
    bool rotation = false;
    bool opacity = false;
    bool color = false;
};

inline Mat3 rotation_from_quaternion(const Vec4& q_unit) {
    const double w = q_unit[0], x = q_unit[1], y = q_unit[2], z = q_unit[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// Sigma = R S S^T R^T with S = diag(exp(log_scale)) and R from the
// normalized quaternion. Symmetric PSD by construction.
inline Mat3 covariance_from(const Vec3& log_scale, const Vec4& q) {
    const double norm = q.norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw ValidationError("covariance_from: degenerate rotation (zero-norm quaternion)");
    }
    const Mat3 r = rotation_from_quaternion(q / norm);
    const Mat3 m = r * Vec3(log_scale.array().exp()).asDiagonal();
    return m * m.transpose();
}

// Largest eigenvalue of a symmetric 2x2 matrix.
inline double max_eigenvalue2(const Mat2& a) {
    const double mid = 0.5 * (a(0, 0) + a(1, 1));
    const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    const double disc = std::sqrt(std::max(mid * mid - det, 0.0));
    return mid + disc;
}

// First-order perspective projection of one primitive: camera point
// p = R mu + t, pinhole mean, and cov2d = J W Sigma W^T J^T with J the
// pinhole Jacobian at p. Returns nullopt when p_z <= z_near.
inline std::optional<Projected2D> project(const GaussianPrimitive& prim, const Camera& cam) {
    const Vec3 p = cam.to_camera(prim.center);
    if (p.z() <= cam.z_near) return std::nullopt;

    Projected2D out;
    out.view_z = p.z();
    out.dist = (prim.center - cam.center()).norm();
    out.mean2d = Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);

    Eigen::Matrix<double, 2, 3> jac;
    jac << cam.fx / p.z(), 0, -cam.fx * p.x() / (p.z() * p.z()),
           0, cam.fy / p.z(), -cam.fy * p.y() / (p.z() * p.z());

    const Mat3 sigma = covariance_from(prim.log_scale, prim.rotation);
    const Eigen::Matrix<double, 2, 3> t = jac * cam.rotation;
    out.cov2d = t * sigma * t.transpose();

    Mat2 dilated = out.cov2d;
    dilated(0, 0) += kCovDilation;
    dilated(1, 1) += kCovDilation;
    const double det = dilated(0, 0) * dilated(1, 1) - dilated(0, 1) * dilated(1, 0);
    Mat2 conic;
    conic << dilated(1, 1), -dilated(0, 1), -dilated(1, 0), dilated(0, 0);
    out.conic = conic / det;
    out.radius = kSupportSigma * std::sqrt(max_eigenvalue2(dilated));
    return out;
}

// exp(-1/2 d^T conic d), zero outside the support radius, clamped to [0, 1].
inline double gaussian_weight(const Projected2D& proj, const Vec2& pixel) {
    const Vec2 d = pixel - proj.mean2d;
    if (d.norm() > proj.radius) return 0.0;
    const double e = -0.5 * d.dot(proj.conic * d);
    return std::min(std::exp(e), 1.0);
}

// Uniformly random field inside `box`: isotropic scale from the box-diagonal
// spacing heuristic, opacity 0.1, colors zeroed (SH DC zero renders mid-gray).
inline GaussianField init_random(size_t n, const Aabb& box, uint64_t seed,
                                 ColorMode mode = ColorMode::Sh, int sh_degree = 3) {
    if (n == 0) throw ValidationError("init_random: empty field requested");
    if (box.degenerate()) throw ValidationError("init_random: degenerate bounding box");

    GaussianField field;
    field.color_mode = mode;
    field.sh_degree = sh_degree;
    field.primitives.resize(n);

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double iso_scale = box.diagonal() / std::cbrt(static_cast<double>(n));
    const int k = field.feature_dim();

    for (auto& prim : field.primitives) {
        for (int a = 0; a < 3; ++a) {
            prim.center[a] = box.min[a] + u(rng) * (box.max[a] - box.min[a]);
        }
        prim.log_scale.setConstant(std::log(iso_scale));
        prim.rotation = Vec4(1, 0, 0, 0);
        prim.opacity_logit = logit(0.1);
        prim.color_params = Eigen::VectorXd::Zero(k);
    }
    return field;
}

}  // namespace dsplat
