#pragma once

#include "dsplat/io.hpp"

namespace dsplat {

enum class SceneKind { TexturedPlanes, GaussianClusters, SphereShell };

// Synthetic desk-scale scene description: a ground-truth Gaussian field, a
// ring of train/test cameras, and a mono-like corruption a*d + b + noise
// applied to the ground-truth depth.
struct SceneSpec {
    SceneKind kind = SceneKind::TexturedPlanes;
    size_t n_primitives = 400;
    double depth_min = 2.0, depth_max = 4.0;
    double texture_freq = 3.0;
    int n_planes = 2;
    int n_clusters = 5;
    double ring_radius = 3.0;
    int train_views = 3;
    int test_views = 5;
    double arc_degrees = 40.0;
    double test_arc_degrees = 0.0;  // 0: same arc as training
    Vec3 lookat = Vec3::Zero();
    double corrupt_a = 1.0, corrupt_b = 0.0, corrupt_sigma = 0.0;
    int image_size = 48;
    double focal = 60.0;
    double bbox_pad = 0.1;  // relative padding of the content box in the manifest

    void validate() const {
        if (n_primitives == 0) throw ValidationError("scene: n_primitives must be >= 1");
        if (!(depth_min > 0) || !(depth_max > depth_min))
            throw ValidationError("scene: depth range must be positive and increasing");
        if (train_views < 1 || test_views < 0) throw ValidationError("scene: need >= 1 train view");
        if (!(ring_radius > 0)) throw ValidationError("scene: degenerate camera ring");
        if (image_size < 8) throw ValidationError("scene: image_size must be >= 8");
        if (n_planes < 1 || n_clusters < 1) throw ValidationError("scene: counts must be >= 1");
        if (!(corrupt_a > 0)) throw ValidationError("scene: corruption scale must be positive");
    }
};

inline std::string print_scene_spec(const SceneSpec& s) {
    std::ostringstream os;
    os.precision(17);
    os << "kind = "
       << (s.kind == SceneKind::TexturedPlanes
               ? "textured-planes"
               : (s.kind == SceneKind::GaussianClusters ? "gaussian-clusters" : "sphere-shell"))
       << "\n";
    os << "n_primitives = " << s.n_primitives << "\n";
    os << "depth_min = " << s.depth_min << "\n";
    os << "depth_max = " << s.depth_max << "\n";
    os << "texture_freq = " << s.texture_freq << "\n";
    os << "n_planes = " << s.n_planes << "\n";
    os << "n_clusters = " << s.n_clusters << "\n";
    os << "ring_radius = " << s.ring_radius << "\n";
    os << "train_views = " << s.train_views << "\n";
    os << "test_views = " << s.test_views << "\n";
    os << "arc_degrees = " << s.arc_degrees << "\n";
    os << "test_arc_degrees = " << s.test_arc_degrees << "\n";
    os << "lookat = " << s.lookat.x() << "," << s.lookat.y() << "," << s.lookat.z() << "\n";
    os << "corrupt_a = " << s.corrupt_a << "\n";
    os << "corrupt_b = " << s.corrupt_b << "\n";
    os << "corrupt_sigma = " << s.corrupt_sigma << "\n";
    os << "image_size = " << s.image_size << "\n";
    os << "focal = " << s.focal << "\n";
    os << "bbox_pad = " << s.bbox_pad << "\n";
    return os.str();
}

inline SceneSpec parse_scene_spec(const std::string& text) {
    SceneSpec s;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw ValidationError("scene spec: malformed line " + std::to_string(lineno));
            continue;
        }
        auto trim = [](std::string t) {
            const auto b = t.find_first_not_of(" \t\r");
            const auto e = t.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "kind") {
                if (val == "textured-planes") s.kind = SceneKind::TexturedPlanes;
                else if (val == "gaussian-clusters") s.kind = SceneKind::GaussianClusters;
                else if (val == "sphere-shell") s.kind = SceneKind::SphereShell;
                else throw ValidationError("scene spec: unknown kind '" + val + "'");
            }
            else if (key == "n_primitives") s.n_primitives = std::stoull(val);
            else if (key == "depth_min") s.depth_min = std::stod(val);
            else if (key == "depth_max") s.depth_max = std::stod(val);
            else if (key == "texture_freq") s.texture_freq = std::stod(val);
            else if (key == "n_planes") s.n_planes = std::stoi(val);
            else if (key == "n_clusters") s.n_clusters = std::stoi(val);
            else if (key == "ring_radius") s.ring_radius = std::stod(val);
            else if (key == "train_views") s.train_views = std::stoi(val);
            else if (key == "test_views") s.test_views = std::stoi(val);
            else if (key == "arc_degrees") s.arc_degrees = std::stod(val);
            else if (key == "test_arc_degrees") s.test_arc_degrees = std::stod(val);
            else if (key == "lookat") {
                std::istringstream vs(val);
                std::string part;
                for (int a = 0; a < 3 && std::getline(vs, part, ','); ++a) s.lookat[a] = std::stod(part);
            }
            else if (key == "corrupt_a") s.corrupt_a = std::stod(val);
            else if (key == "corrupt_b") s.corrupt_b = std::stod(val);
            else if (key == "corrupt_sigma") s.corrupt_sigma = std::stod(val);
            else if (key == "image_size") s.image_size = std::stoi(val);
            else if (key == "focal") s.focal = std::stod(val);
            else if (key == "bbox_pad") s.bbox_pad = std::stod(val);
            else throw ValidationError("scene spec: unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ValidationError("scene spec: bad value for '" + key + "'");
        } catch (const std::out_of_range&) {
            throw ValidationError("scene spec: value out of range for '" + key + "'");
        }
    }
    s.validate();
    return s;
}

// Camera on the ring at angle theta (radians), looking at `lookat`.
inline Camera ring_camera(const SceneSpec& s, double theta) {
    const Vec3 pos = s.lookat + s.ring_radius * Vec3(std::sin(theta), 0.0, -std::cos(theta));
    const Vec3 fwd = (s.lookat - pos).normalized();
    const Vec3 up_hint(0, 1, 0);
    const Vec3 right = up_hint.cross(fwd).normalized();
    const Vec3 down = fwd.cross(right);
    Camera cam;
    cam.width = cam.height = s.image_size;
    cam.fx = cam.fy = s.focal;
    cam.cx = cam.cy = 0.5 * (s.image_size - 1);
    cam.z_near = 0.05 * s.depth_min;
    cam.rotation.row(0) = right;
    cam.rotation.row(1) = down;
    cam.rotation.row(2) = fwd;
    cam.translation = -cam.rotation * pos;
    return cam;
}

struct SynthResult {
    Dataset dataset;
    GaussianField gt_field;
};

namespace detail {

inline void set_dc_color(GaussianPrimitive& prim, const Vec3& rgb) {
    prim.color_params = Eigen::VectorXd::Zero(3);
    for (int c = 0; c < 3; ++c) prim.color_params[c] = (std::clamp(rgb[c], 0.0, 1.0) - 0.5) / kSh0;
}

inline double quantize8(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline double through_float(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

// Builds the ground-truth field, renders every view, and derives the
// mono-like depth by the affine+noise corruption. Images and depth maps are
// quantized exactly as the on-disk formats store them, so a saved-and-loaded
// dataset reproduces in-memory training bit for bit.
inline SynthResult synth_scene(const SceneSpec& spec, uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    SynthResult out;
    GaussianField& field = out.gt_field;
    field.color_mode = ColorMode::Sh;
    field.sh_degree = 0;

    const double half_angle = 0.5 * spec.image_size / spec.focal;
    const double depth_mid = 0.5 * (spec.depth_min + spec.depth_max);
    // World z of a point at distance d in front of the central camera.
    const auto z_at = [&](double d) { return spec.lookat.z() - spec.ring_radius + d; };

    if (spec.kind == SceneKind::TexturedPlanes) {
        const size_t per_plane = std::max<size_t>(1, spec.n_primitives / spec.n_planes);
        for (int pl = 0; pl < spec.n_planes; ++pl) {
            const double d = spec.n_planes == 1
                                 ? depth_mid
                                 : spec.depth_min + (spec.depth_max - spec.depth_min) * pl /
                                                        (spec.n_planes - 1);
            // The farthest plane is a backdrop wide enough to fill side
            // cameras' frusta, so every ray terminates on geometry.
            const bool backdrop = pl == spec.n_planes - 1;
            const double half = d * half_angle * (backdrop ? 2.6 : 1.2);
            const int m = std::max(1, static_cast<int>(std::ceil(std::sqrt(double(per_plane)))));
            const double spacing = 2.0 * half / m;
            // Nearer planes keep blocky gaps so farther geometry stays
            // visible.
            const int blocks = (m + 1) / 2;
            std::vector<uint8_t> keep(static_cast<size_t>(blocks) * blocks, 1);
            if (!backdrop)
                for (auto& k : keep) k = u01(rng) >= 0.45;
            for (int gy = 0; gy < m; ++gy) {
                for (int gx = 0; gx < m; ++gx) {
                    if (!keep[static_cast<size_t>(gy / 2) * blocks + gx / 2]) continue;
                    GaussianPrimitive prim;
                    const double px = -half + (gx + 0.5) * spacing + (u01(rng) - 0.5) * 0.3 * spacing;
                    const double py = -half + (gy + 0.5) * spacing + (u01(rng) - 0.5) * 0.3 * spacing;
                    prim.center = Vec3(spec.lookat.x() + px, spec.lookat.y() + py, z_at(d));
                    prim.log_scale.setConstant(std::log(0.65 * spacing));
                    prim.rotation = Vec4(1, 0, 0, 0);
                    prim.opacity_logit = logit(0.97);
                    const double f = spec.texture_freq;
                    detail::set_dc_color(
                        prim, Vec3(0.5 + 0.4 * std::sin(f * px + 0.7 * pl) * std::cos(f * py),
                                   0.5 + 0.4 * std::sin(f * px * 1.3 + 2.1) * std::sin(f * py + 0.5 * pl),
                                   0.5 + 0.4 * std::cos(f * px - 1.1) * std::sin(f * py * 0.8 + 1.9)));
                    field.primitives.push_back(prim);
                }
            }
        }
    } else if (spec.kind == SceneKind::GaussianClusters) {
        const double half_xy = 0.85 * depth_mid * half_angle;
        const double zmin = z_at(spec.depth_min), zmax = z_at(spec.depth_max);
        std::vector<Vec3> centers(spec.n_clusters);
        for (auto& c : centers)
            c = Vec3(spec.lookat.x() + (u01(rng) * 2 - 1) * half_xy,
                     spec.lookat.y() + (u01(rng) * 2 - 1) * half_xy,
                     zmin + u01(rng) * (zmax - zmin));
        const double cluster_radius = 0.35 * half_xy;
        const double s0 = 2.2 * half_xy / std::cbrt(double(spec.n_primitives));
        for (size_t i = 0; i < spec.n_primitives; ++i) {
            GaussianPrimitive prim;
            const Vec3& c = centers[i % centers.size()];
            prim.center = c + cluster_radius * Vec3(gauss(rng), gauss(rng), gauss(rng));
            for (int a = 0; a < 3; ++a)
                prim.log_scale[a] = std::log(s0) + (u01(rng) * 2 - 1) * std::log(2.2);
            Vec4 q(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
            prim.rotation = q.normalized();
            prim.opacity_logit = logit(0.5 + 0.45 * u01(rng));
            detail::set_dc_color(prim, Vec3(0.15 + 0.7 * u01(rng), 0.15 + 0.7 * u01(rng),
                                            0.15 + 0.7 * u01(rng)));
            field.primitives.push_back(prim);
        }
    } else {  // SphereShell
        const double shell_r = 0.5 * (spec.depth_max - spec.depth_min);
        const Vec3 center(spec.lookat.x(), spec.lookat.y(), z_at(depth_mid));
        const double s0 = 2.0 * shell_r * std::sqrt(3.14159265358979 / double(spec.n_primitives));
        for (size_t i = 0; i < spec.n_primitives; ++i) {
            GaussianPrimitive prim;
            Vec3 n(gauss(rng), gauss(rng), gauss(rng));
            n.normalize();
            prim.center = center + shell_r * n;
            prim.log_scale.setConstant(std::log(0.6 * s0));
            prim.rotation = Vec4(1, 0, 0, 0);
            prim.opacity_logit = logit(0.9);
            const double f = spec.texture_freq;
            detail::set_dc_color(prim,
                                 Vec3(0.5 + 0.4 * std::sin(f * n.x() * 3) * std::cos(f * n.y() * 2),
                                      0.5 + 0.4 * std::sin(f * n.y() * 3 + 1.0),
                                      0.5 + 0.4 * std::cos(f * n.z() * 3 + 2.0)));
            field.primitives.push_back(prim);
        }
    }

    Aabb box{field.primitives[0].center, field.primitives[0].center};
    for (const auto& p : field.primitives) box.expand(p.center);
    out.dataset.bbox = box.padded(spec.bbox_pad);

    RenderSettings settings;
    const auto make_view = [&](double theta, const std::string& name, bool with_depth) {
        View v;
        v.name = name;
        v.camera = ring_camera(spec, theta);
        const auto colors = compute_colors(field, nullptr, v.camera);
        v.image = render_color(field, v.camera, colors, settings);
        for (auto& c : v.image.rgb) c = detail::quantize8(c);
        DepthMap gt = render_depth(field, v.camera, settings);
        for (auto& d : gt.depth) d = detail::through_float(d);
        if (with_depth) {
            DepthMap mono = gt;
            for (auto& d : mono.depth) {
                double m = spec.corrupt_a * d + spec.corrupt_b;
                if (spec.corrupt_sigma > 0) m += spec.corrupt_sigma * gauss(rng);
                d = detail::through_float(std::max(m, 0.0));
            }
            v.depth_mono = std::move(mono);
        }
        v.depth_gt = std::move(gt);
        return v;
    };

    const double arc = spec.arc_degrees * 3.14159265358979 / 180.0;
    for (int i = 0; i < spec.train_views; ++i) {
        const double t = spec.train_views == 1 ? 0.5 : double(i) / (spec.train_views - 1);
        const double theta = -0.5 * arc + t * arc;
        out.dataset.train.push_back(make_view(theta, "train_" + std::to_string(i), true));
    }
    const double test_arc =
        (spec.test_arc_degrees > 0 ? spec.test_arc_degrees : spec.arc_degrees) *
        3.14159265358979 / 180.0;
    for (int i = 0; i < spec.test_views; ++i) {
        const double theta = -0.5 * test_arc + test_arc * (i + 0.5) / spec.test_views;
        out.dataset.test.push_back(make_view(theta, "test_" + std::to_string(i), false));
    }
    return out;
}

}  // namespace dsplat
