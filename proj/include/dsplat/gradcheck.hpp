#pragma once

#include "dsplat/grad.hpp"

namespace dsplat {

// Randomized scene for gradient verification: anisotropic primitives spread
// in front of the camera, opacities kept clear of the clamp/skip kinks.
inline GaussianField gradcheck_scene(size_t n, uint64_t seed, int sh_degree) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GaussianField f;
    f.color_mode = ColorMode::Sh;
    f.sh_degree = sh_degree;
    for (size_t i = 0; i < n; ++i) {
        GaussianPrimitive p;
        p.center = Vec3((u(rng) - 0.5) * 1.4, (u(rng) - 0.5) * 1.4, 2.0 + 2.0 * u(rng));
        for (int a = 0; a < 3; ++a) p.log_scale[a] = std::log(0.03 + 0.12 * u(rng));
        Vec4 q(u(rng) * 2 - 1, u(rng) * 2 - 1, u(rng) * 2 - 1, u(rng) * 2 - 1);
        p.rotation = q.normalized();
        p.opacity_logit = logit(0.1 + 0.7 * u(rng));
        p.color_params = Eigen::VectorXd::Zero(f.feature_dim());
        for (int k = 0; k < f.feature_dim(); ++k) p.color_params[k] = (u(rng) - 0.5) * 0.6;
        f.primitives.push_back(p);
    }
    return f;
}

inline Camera gradcheck_camera(int size) {
    Camera c;
    c.width = c.height = size;
    c.fx = c.fy = 1.2 * size;
    c.cx = c.cy = 0.5 * (size - 1);
    c.z_near = 0.05;
    return c;
}

}  // namespace dsplat
