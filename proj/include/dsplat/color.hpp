#pragma once

#include "dsplat/field.hpp"

#include <array>
#include <map>

namespace dsplat {

// ---------------------------------------------------------------------------
// Real spherical harmonics, Cartesian form, degrees 0..4.
// Polynomials assume a unit direction; off-sphere extensions are irrelevant
// because direction gradients are projected onto the tangent space.
// ---------------------------------------------------------------------------

constexpr int kMaxShDegree = 4;

inline constexpr int sh_basis_size(int degree) { return (degree + 1) * (degree + 1); }

namespace detail {
constexpr double kSh0 = 0.28209479177387814;
constexpr double kSh1 = 0.4886025119029199;
constexpr double kSh2[5] = {1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
                            1.0925484305920792, 0.5462742152960396};
constexpr double kSh3[7] = {0.5900435899266435, 2.890611442640554, 0.4570457994644658,
                            0.3731763325901154, 0.4570457994644658, 1.445305721320277,
                            0.5900435899266435};
constexpr double kSh4[9] = {2.5033429417967046, 1.7701307697799304, 0.9461746957575601,
                            0.6690465435572892, 0.10578554691520431, 0.6690465435572892,
                            0.47308734787878004, 1.7701307697799304, 0.6258357354491761};
}  // namespace detail

// Basis values for a unit direction; `out` must hold sh_basis_size(degree).
inline void sh_basis(int degree, const Vec3& dir, double* out) {
    const double x = dir.x(), y = dir.y(), z = dir.z();
    out[0] = detail::kSh0;
    if (degree < 1) return;
    out[1] = detail::kSh1 * y;
    out[2] = detail::kSh1 * z;
    out[3] = detail::kSh1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z, xy = x * y, yz = y * z, xz = x * z;
    out[4] = detail::kSh2[0] * xy;
    out[5] = detail::kSh2[1] * yz;
    out[6] = detail::kSh2[2] * (3 * zz - 1);
    out[7] = detail::kSh2[3] * xz;
    out[8] = detail::kSh2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = detail::kSh3[0] * y * (3 * xx - yy);
    out[10] = detail::kSh3[1] * xy * z;
    out[11] = detail::kSh3[2] * y * (5 * zz - 1);
    out[12] = detail::kSh3[3] * z * (5 * zz - 3);
    out[13] = detail::kSh3[4] * x * (5 * zz - 1);
    out[14] = detail::kSh3[5] * z * (xx - yy);
    out[15] = detail::kSh3[6] * x * (xx - 3 * yy);
    if (degree < 4) return;
    out[16] = detail::kSh4[0] * xy * (xx - yy);
    out[17] = detail::kSh4[1] * yz * (3 * xx - yy);
    out[18] = detail::kSh4[2] * xy * (7 * zz - 1);
    out[19] = detail::kSh4[3] * yz * (7 * zz - 3);
    out[20] = detail::kSh4[4] * (35 * zz * zz - 30 * zz + 3);
    out[21] = detail::kSh4[5] * xz * (7 * zz - 3);
    out[22] = detail::kSh4[6] * (xx - yy) * (7 * zz - 1);
    out[23] = detail::kSh4[7] * xz * (xx - 3 * yy);
    out[24] = detail::kSh4[8] * (xx * xx - 6 * xx * yy + yy * yy);
}

// d(basis_k)/d(dir) for every basis function; `out` holds 3 entries per k.
inline void sh_basis_grad(int degree, const Vec3& dir, Vec3* out) {
    const double x = dir.x(), y = dir.y(), z = dir.z();
    out[0] = Vec3::Zero();
    if (degree < 1) return;
    out[1] = detail::kSh1 * Vec3(0, 1, 0);
    out[2] = detail::kSh1 * Vec3(0, 0, 1);
    out[3] = detail::kSh1 * Vec3(1, 0, 0);
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[4] = detail::kSh2[0] * Vec3(y, x, 0);
    out[5] = detail::kSh2[1] * Vec3(0, z, y);
    out[6] = detail::kSh2[2] * Vec3(0, 0, 6 * z);
    out[7] = detail::kSh2[3] * Vec3(z, 0, x);
    out[8] = detail::kSh2[4] * Vec3(2 * x, -2 * y, 0);
    if (degree < 3) return;
    out[9] = detail::kSh3[0] * Vec3(6 * x * y, 3 * xx - 3 * yy, 0);
    out[10] = detail::kSh3[1] * Vec3(y * z, x * z, x * y);
    out[11] = detail::kSh3[2] * Vec3(0, 5 * zz - 1, 10 * y * z);
    out[12] = detail::kSh3[3] * Vec3(0, 0, 15 * zz - 3);
    out[13] = detail::kSh3[4] * Vec3(5 * zz - 1, 0, 10 * x * z);
    out[14] = detail::kSh3[5] * Vec3(2 * x * z, -2 * y * z, xx - yy);
    out[15] = detail::kSh3[6] * Vec3(3 * xx - 3 * yy, -6 * x * y, 0);
    if (degree < 4) return;
    out[16] = detail::kSh4[0] * Vec3(y * (3 * xx - yy), x * (xx - 3 * yy), 0);
    out[17] = detail::kSh4[1] * Vec3(6 * x * y * z, z * (3 * xx - 3 * yy), y * (3 * xx - yy));
    out[18] = detail::kSh4[2] * Vec3(y * (7 * zz - 1), x * (7 * zz - 1), 14 * x * y * z);
    out[19] = detail::kSh4[3] * Vec3(0, z * (7 * zz - 3), y * (21 * zz - 3));
    out[20] = detail::kSh4[4] * Vec3(0, 0, 140 * zz * z - 60 * z);
    out[21] = detail::kSh4[5] * Vec3(z * (7 * zz - 3), 0, x * (21 * zz - 3));
    out[22] = detail::kSh4[6] * Vec3(2 * x * (7 * zz - 1), -2 * y * (7 * zz - 1), 14 * z * (xx - yy));
    out[23] = detail::kSh4[7] * Vec3(z * (3 * xx - 3 * yy), -6 * x * y * z, x * (xx - 3 * yy));
    out[24] = detail::kSh4[8] * Vec3(4 * x * (xx - 3 * yy), 4 * y * (yy - 3 * xx), 0);
}

// Coefficients are basis-major with interleaved channels: coeffs[k*3 + c].
// Returns clamp(sum_k c_k Y_k(dir) + 0.5, 0, 1) per channel.
inline Vec3 sh_eval(const Eigen::VectorXd& coeffs, int degree, const Vec3& dir) {
    double basis[25];
    sh_basis(degree, dir, basis);
    const int k = sh_basis_size(degree);
    Vec3 rgb;
    for (int c = 0; c < 3; ++c) {
        double v = 0.5;
        for (int i = 0; i < k; ++i) v += coeffs[i * 3 + c] * basis[i];
        rgb[c] = std::clamp(v, 0.0, 1.0);
    }
    return rgb;
}

struct ShEvalGrads {
    Eigen::VectorXd coeffs;  // K = 3 * (degree+1)^2
    Vec3 dir = Vec3::Zero();
};

// VJP of sh_eval; channels pinned at the clamp pass no gradient.
inline ShEvalGrads sh_eval_vjp(const Eigen::VectorXd& coeffs, int degree, const Vec3& dir,
                               const Vec3& rgb_cot) {
    double basis[25];
    Vec3 dbasis[25];
    sh_basis(degree, dir, basis);
    sh_basis_grad(degree, dir, dbasis);
    const int k = sh_basis_size(degree);
    ShEvalGrads g;
    g.coeffs = Eigen::VectorXd::Zero(coeffs.size());
    for (int c = 0; c < 3; ++c) {
        double v = 0.5;
        for (int i = 0; i < k; ++i) v += coeffs[i * 3 + c] * basis[i];
        if (v <= 0.0 || v >= 1.0) continue;
        for (int i = 0; i < k; ++i) {
            g.coeffs[i * 3 + c] = rgb_cot[c] * basis[i];
            g.dir += rgb_cot[c] * coeffs[i * 3 + c] * dbasis[i];
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Multi-resolution hash grid encoder.
// ---------------------------------------------------------------------------

struct HashGridConfig {
    int levels = 16;
    int base_resolution = 16;
    int max_resolution = 512;
    int log2_table_size = 19;
    int features_per_entry = 2;

    int output_dim() const { return levels * features_per_entry; }
    int64_t table_entries() const { return int64_t(levels) << log2_table_size; }
};

struct HashGridEncoder {
    HashGridConfig cfg;
    Vec3 bb_min = Vec3::Constant(-1.0);
    Vec3 bb_max = Vec3::Constant(1.0);
    std::vector<int> resolutions;
    std::vector<double> table;  // [level][entry][feature]

    void init(uint64_t seed) {
        resolutions.resize(cfg.levels);
        const double growth =
            cfg.levels > 1 ? std::exp(std::log(double(cfg.max_resolution) / cfg.base_resolution) /
                                      (cfg.levels - 1))
                           : 1.0;
        for (int l = 0; l < cfg.levels; ++l) {
            resolutions[l] = static_cast<int>(std::round(cfg.base_resolution * std::pow(growth, l)));
            if (l > 0 && resolutions[l] <= resolutions[l - 1]) resolutions[l] = resolutions[l - 1] + 1;
        }
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1e-4, 1e-4);
        table.resize(static_cast<size_t>(cfg.table_entries()) * cfg.features_per_entry);
        for (auto& v : table) v = u(rng);
    }

    // Spatial hash of an integer corner: XOR of coordinate-prime products,
    // masked to the table size (power of two).
    uint32_t hash(int l, uint32_t ix, uint32_t iy, uint32_t iz) const {
        const uint32_t h = (ix * 1u) ^ (iy * 2654435761u) ^ (iz * 805459861u);
        return h & ((1u << cfg.log2_table_size) - 1u);
    }

    size_t entry_index(int l, uint32_t hashed, int f) const {
        return ((static_cast<size_t>(l) << cfg.log2_table_size) + hashed) *
                   static_cast<size_t>(cfg.features_per_entry) +
               static_cast<size_t>(f);
    }

    Vec3 to_unit(const Vec3& pos) const {
        Vec3 u;
        for (int a = 0; a < 3; ++a) {
            const double ext = bb_max[a] - bb_min[a];
            u[a] = std::clamp((pos[a] - bb_min[a]) / ext, 0.0, 1.0);
        }
        return u;
    }

    // Trilinear interpolation of the 8 surrounding corners at every level,
    // concatenated level-major into `out` (cfg.output_dim() values).
    void encode(const Vec3& pos, double* out) const {
        const Vec3 u = to_unit(pos);
        const int fpe = cfg.features_per_entry;
        for (int l = 0; l < cfg.levels; ++l) {
            const int res = resolutions[l];
            double frac[3];
            uint32_t c0[3];
            for (int a = 0; a < 3; ++a) {
                const double s = u[a] * res;
                double fl = std::floor(s);
                if (fl > res - 1) fl = res - 1;
                c0[a] = static_cast<uint32_t>(fl);
                frac[a] = s - fl;
            }
            for (int f = 0; f < fpe; ++f) out[l * fpe + f] = 0.0;
            for (int corner = 0; corner < 8; ++corner) {
                const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
                const double w = (dx ? frac[0] : 1 - frac[0]) * (dy ? frac[1] : 1 - frac[1]) *
                                 (dz ? frac[2] : 1 - frac[2]);
                const uint32_t h = hash(l, c0[0] + dx, c0[1] + dy, c0[2] + dz);
                for (int f = 0; f < fpe; ++f) out[l * fpe + f] += w * table[entry_index(l, h, f)];
            }
        }
    }

    // VJP: accumulates table-entry cotangents into `table_grads` and the
    // position cotangent (zero along axes pinned by the bounding-box clamp).
    void encode_vjp(const Vec3& pos, const double* upstream,
                    std::map<int64_t, double>& table_grads, Vec3& pos_cot) const {
        const Vec3 u = to_unit(pos);
        const int fpe = cfg.features_per_entry;
        bool clamped[3];
        for (int a = 0; a < 3; ++a) {
            const double raw = (pos[a] - bb_min[a]) / (bb_max[a] - bb_min[a]);
            clamped[a] = raw <= 0.0 || raw >= 1.0;
        }
        for (int l = 0; l < cfg.levels; ++l) {
            const int res = resolutions[l];
            double frac[3];
            uint32_t c0[3];
            for (int a = 0; a < 3; ++a) {
                const double s = u[a] * res;
                double fl = std::floor(s);
                if (fl > res - 1) fl = res - 1;
                c0[a] = static_cast<uint32_t>(fl);
                frac[a] = s - fl;
            }
            for (int corner = 0; corner < 8; ++corner) {
                const int d[3] = {corner & 1, (corner >> 1) & 1, (corner >> 2) & 1};
                const double wa[3] = {d[0] ? frac[0] : 1 - frac[0], d[1] ? frac[1] : 1 - frac[1],
                                      d[2] ? frac[2] : 1 - frac[2]};
                const double w = wa[0] * wa[1] * wa[2];
                const uint32_t h = hash(l, c0[0] + d[0], c0[1] + d[1], c0[2] + d[2]);
                double up_dot_entry = 0;
                for (int f = 0; f < fpe; ++f) {
                    const size_t idx = entry_index(l, h, f);
                    table_grads[static_cast<int64_t>(idx)] += w * upstream[l * fpe + f];
                    up_dot_entry += upstream[l * fpe + f] * table[idx];
                }
                for (int a = 0; a < 3; ++a) {
                    if (clamped[a]) continue;
                    const double dw_da = (d[a] ? 1.0 : -1.0) * (wa[(a + 1) % 3] * wa[(a + 2) % 3]);
                    pos_cot[a] += up_dot_entry * dw_da * res / (bb_max[a] - bb_min[a]);
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Small fully connected network, split so the view-independent stage can be
// cached per primitive.
// ---------------------------------------------------------------------------

struct MlpStage {
    std::vector<int> sizes;       // e.g. {32, 64, 64, 64}
    std::vector<double> weights;  // per layer: row-major W (out x in), then bias
    bool sigmoid_output = false;  // ReLU between layers either way

    int layer_count() const { return static_cast<int>(sizes.size()) - 1; }
    size_t param_count() const {
        size_t n = 0;
        for (int l = 0; l + 1 < static_cast<int>(sizes.size()); ++l)
            n += static_cast<size_t>(sizes[l + 1]) * sizes[l] + sizes[l + 1];
        return n;
    }

    void init(uint64_t seed) {
        weights.resize(param_count());
        std::mt19937_64 rng(seed);
        size_t off = 0;
        for (int l = 0; l + 1 < static_cast<int>(sizes.size()); ++l) {
            const int in = sizes[l], out = sizes[l + 1];
            const double bound = std::sqrt(6.0 / (in + out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (int i = 0; i < out * in; ++i) weights[off + i] = u(rng);
            off += static_cast<size_t>(out) * in;
            for (int i = 0; i < out; ++i) weights[off + i] = 0.0;
            off += out;
        }
    }

    // Forward pass; post-activation values per layer (input included) go to
    // `acts` for use by backward.
    void forward(const std::vector<double>& input, std::vector<std::vector<double>>& acts) const {
        acts.assign(1, input);
        size_t off = 0;
        for (int l = 0; l + 1 < static_cast<int>(sizes.size()); ++l) {
            const int in = sizes[l], out = sizes[l + 1];
            const bool last = (l + 2 == static_cast<int>(sizes.size()));
            std::vector<double> z(out);
            for (int o = 0; o < out; ++o) {
                double s = weights[off + static_cast<size_t>(out) * in + o];  // bias
                const double* row = &weights[off + static_cast<size_t>(o) * in];
                for (int i = 0; i < in; ++i) s += row[i] * acts.back()[i];
                if (last)
                    z[o] = sigmoid_output ? sigmoid(s) : s;
                else
                    z[o] = std::max(s, 0.0);
            }
            off += static_cast<size_t>(out) * in + out;
            acts.push_back(std::move(z));
        }
    }

    // Backward pass from output cotangent; accumulates into `weight_grads`
    // (same layout as weights) and returns the input cotangent.
    std::vector<double> backward(const std::vector<std::vector<double>>& acts,
                                 const std::vector<double>& out_cot,
                                 std::vector<double>& weight_grads) const {
        const int layers = layer_count();
        std::vector<double> delta = out_cot;
        // Convert output cotangent through the output nonlinearity.
        if (sigmoid_output) {
            const auto& y = acts.back();
            for (size_t i = 0; i < delta.size(); ++i) delta[i] *= y[i] * (1.0 - y[i]);
        }
        std::vector<size_t> offsets(layers);
        size_t off = 0;
        for (int l = 0; l < layers; ++l) {
            offsets[l] = off;
            off += static_cast<size_t>(sizes[l + 1]) * sizes[l] + sizes[l + 1];
        }
        for (int l = layers - 1; l >= 0; --l) {
            const int in = sizes[l], out = sizes[l + 1];
            if (l != layers - 1) {
                // ReLU gate: post-activation zero means the unit was clipped.
                for (int o = 0; o < out; ++o)
                    if (acts[l + 1][o] <= 0.0) delta[o] = 0.0;
            }
            std::vector<double> prev_cot(in, 0.0);
            for (int o = 0; o < out; ++o) {
                const double* row = &weights[offsets[l] + static_cast<size_t>(o) * in];
                double* grow = &weight_grads[offsets[l] + static_cast<size_t>(o) * in];
                for (int i = 0; i < in; ++i) {
                    grow[i] += delta[o] * acts[l][i];
                    prev_cot[i] += delta[o] * row[i];
                }
                weight_grads[offsets[l] + static_cast<size_t>(out) * in + o] += delta[o];
            }
            delta = std::move(prev_cot);
        }
        return delta;
    }
};

// ---------------------------------------------------------------------------
// Neural color renderer: hash encoding of the center feeds a cacheable
// view-independent stage; the last layers merge the view direction.
// ---------------------------------------------------------------------------

struct NeuralColorConfig {
    HashGridConfig grid;
    int mlp_width = 64;
    int feature_dim = 64;     // stage-A output
    int stage_a_layers = 3;
    int stage_b_layers = 2;
    int dir_sh_degree = 4;

    int dir_encoding_dim() const { return sh_basis_size(dir_sh_degree); }
};

struct NeuralColorState {
    NeuralColorConfig cfg;
    HashGridEncoder encoder;
    MlpStage stage_a;  // encoding -> feature, view independent
    MlpStage stage_b;  // feature (+) direction encoding -> rgb
    uint64_t version = 0;  // bumped on any center/weight/table update

    struct Cache {
        uint64_t version = ~uint64_t(0);
        std::vector<std::vector<double>> features;  // per primitive, stage-A output
    };
    mutable Cache cache;

    void init(uint64_t seed, const Aabb& scene_box) {
        encoder.cfg = cfg.grid;
        encoder.bb_min = scene_box.min;
        encoder.bb_max = scene_box.max;
        encoder.init(seed);
        stage_a.sizes.assign(1, cfg.grid.output_dim());
        for (int l = 0; l < cfg.stage_a_layers - 1; ++l) stage_a.sizes.push_back(cfg.mlp_width);
        stage_a.sizes.push_back(cfg.feature_dim);
        stage_a.sigmoid_output = false;
        stage_a.init(seed + 1);
        stage_b.sizes.assign(1, cfg.feature_dim + cfg.dir_encoding_dim());
        for (int l = 0; l < cfg.stage_b_layers - 1; ++l) stage_b.sizes.push_back(cfg.mlp_width);
        stage_b.sizes.push_back(3);
        stage_b.sigmoid_output = true;
        stage_b.init(seed + 2);
    }

    void invalidate() { ++version; }

    double& table_ref(int64_t idx) { return encoder.table[static_cast<size_t>(idx)]; }
};

namespace detail {

inline std::vector<double> stage_a_feature(const NeuralColorState& st, const Vec3& center) {
    std::vector<double> enc(st.cfg.grid.output_dim());
    st.encoder.encode(center, enc.data());
    std::vector<std::vector<double>> acts;
    st.stage_a.forward(enc, acts);
    return acts.back();
}

}  // namespace detail

// Per-primitive rgb for one view. Stage-A features are computed once per
// field version and reused across cameras; using the cache is semantically
// invisible.
inline std::vector<Vec3> neural_color(const GaussianField& field, const NeuralColorState& st,
                                      const Camera& cam, bool use_cache = true) {
    const size_t n = field.size();
    const bool fresh = use_cache && st.cache.version == st.version && st.cache.features.size() == n;
    if (use_cache && !fresh) {
        st.cache.features.resize(n);
        for (size_t i = 0; i < n; ++i)
            st.cache.features[i] = detail::stage_a_feature(st, field.primitives[i].center);
        st.cache.version = st.version;
    }
    const Vec3 origin = cam.center();
    std::vector<Vec3> colors(n);
    std::vector<double> bin(st.cfg.feature_dim + st.cfg.dir_encoding_dim());
    for (size_t i = 0; i < n; ++i) {
        const std::vector<double> local =
            use_cache ? std::vector<double>() : detail::stage_a_feature(st, field.primitives[i].center);
        const std::vector<double>& feat = use_cache ? st.cache.features[i] : local;
        const Vec3 dir = (field.primitives[i].center - origin).normalized();
        double denc[25];
        sh_basis(st.cfg.dir_sh_degree, dir, denc);
        std::copy(feat.begin(), feat.end(), bin.begin());
        std::copy(denc, denc + st.cfg.dir_encoding_dim(), bin.begin() + st.cfg.feature_dim);
        std::vector<std::vector<double>> acts;
        st.stage_b.forward(bin, acts);
        colors[i] = Vec3(acts.back()[0], acts.back()[1], acts.back()[2]);
    }
    return colors;
}

struct NeuralGrads {
    std::map<int64_t, double> table;  // touched hash-table entries only
    std::vector<double> stage_a;      // same layout as stage_a.weights
    std::vector<double> stage_b;
    std::vector<Vec3> center;         // d(color)/d(center) contributions

    bool empty() const { return table.empty() && stage_a.empty(); }
};

// Per-primitive rgb for either color mode.
inline std::vector<Vec3> compute_colors(const GaussianField& field, const NeuralColorState* neural,
                                        const Camera& cam) {
    if (field.color_mode == ColorMode::Neural) {
        if (!neural) throw ValidationError("compute_colors: neural state required");
        return neural_color(field, *neural, cam);
    }
    const Vec3 origin = cam.center();
    std::vector<Vec3> colors(field.size());
    for (size_t i = 0; i < field.size(); ++i) {
        const Vec3 dir = (field.primitives[i].center - origin).normalized();
        colors[i] = sh_eval(field.primitives[i].color_params, field.sh_degree, dir);
    }
    return colors;
}

// VJP of neural_color: color cotangents back to tables, both MLP stages, and
// the primitive centers (hash-position and view-direction paths).
inline NeuralGrads neural_color_vjp(const GaussianField& field, const NeuralColorState& st,
                                    const Camera& cam, const std::vector<Vec3>& color_cots) {
    NeuralGrads g;
    g.stage_a.assign(st.stage_a.param_count(), 0.0);
    g.stage_b.assign(st.stage_b.param_count(), 0.0);
    g.center.assign(field.size(), Vec3::Zero());
    const Vec3 origin = cam.center();
    const int fdim = st.cfg.feature_dim;
    const int ddim = st.cfg.dir_encoding_dim();

    for (size_t i = 0; i < field.size(); ++i) {
        if (color_cots[i].isZero(0.0)) continue;
        const Vec3& mu = field.primitives[i].center;

        std::vector<double> enc(st.cfg.grid.output_dim());
        st.encoder.encode(mu, enc.data());
        std::vector<std::vector<double>> acts_a;
        st.stage_a.forward(enc, acts_a);

        const Vec3 rel = mu - origin;
        const double r = rel.norm();
        const Vec3 dir = rel / r;
        double denc[25];
        sh_basis(st.cfg.dir_sh_degree, dir, denc);

        std::vector<double> bin(fdim + ddim);
        std::copy(acts_a.back().begin(), acts_a.back().end(), bin.begin());
        std::copy(denc, denc + ddim, bin.begin() + fdim);
        std::vector<std::vector<double>> acts_b;
        st.stage_b.forward(bin, acts_b);

        const std::vector<double> cot{color_cots[i].x(), color_cots[i].y(), color_cots[i].z()};
        const auto in_cot = st.stage_b.backward(acts_b, cot, g.stage_b);

        // Direction-encoding path -> center through the normalization Jacobian.
        Vec3 dbas[25];
        sh_basis_grad(st.cfg.dir_sh_degree, dir, dbas);
        Vec3 dir_cot = Vec3::Zero();
        for (int k = 0; k < ddim; ++k) dir_cot += in_cot[fdim + k] * dbas[k];
        g.center[i] += (dir_cot - dir * dir.dot(dir_cot)) / r;

        // Feature path -> stage A -> encoding -> tables and center.
        const std::vector<double> feat_cot(in_cot.begin(), in_cot.begin() + fdim);
        const auto enc_cot = st.stage_a.backward(acts_a, feat_cot, g.stage_a);
        Vec3 pos_cot = Vec3::Zero();
        st.encoder.encode_vjp(mu, enc_cot.data(), g.table, pos_cot);
        g.center[i] += pos_cot;
    }
    return g;
}

}  // namespace dsplat
