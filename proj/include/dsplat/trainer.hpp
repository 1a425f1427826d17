#pragma once

#include "dsplat/data.hpp"
#include "dsplat/grad.hpp"
#include "dsplat/metrics.hpp"

#include <fstream>
#include <sstream>

namespace dsplat {

enum class ViewSampling { Random, RoundRobin };

struct TrainConfig {
    int64_t total_iters = 6000;
    int64_t soft_start_iter = 1000;  // soft depth term joins at this iteration (0-based)
    double gamma = 0.1;
    double tau = 0.95;
    double lambda = 0.2;
    double delta = 0.05;
    int patch_min = 5;
    int patch_max = 17;

    double lr_center = 1.6e-4;
    double lr_center_final = 1.6e-6;  // exponential decay target at total_iters
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_opacity = 5e-2;
    double lr_color = 2.5e-3;  // SH coefficients
    double lr_neural = 1e-3;   // MLP weights and hash tables

    int64_t densify_interval = 100;
    int64_t densify_start = 500;
    int64_t densify_stop = 4500;
    double densify_grad_threshold = 2e-4;
    double prune_opacity = 5e-3;
    double split_scale_factor = 1.6;
    double densify_size_rel = 0.01;  // fraction of scene extent separating clone from split
    size_t max_primitives = 500000;

    uint64_t seed = 0;
    int threads = 1;
    Vec3 background = Vec3::Zero();
    size_t init_primitives = 1000;
    int64_t eval_interval = 250;
    ViewSampling view_sampling = ViewSampling::Random;
    int depth_reg_views = 1;  // extra views re-sample from the training set

    bool hard_reg = true;
    bool soft_reg = true;
    bool local_norm = true;
    bool global_norm = true;
    bool shape_freeze = true;
    bool center_freeze = true;

    ColorMode color_mode = ColorMode::Neural;
    int sh_degree = 3;
    NeuralColorConfig neural;

    LossWeights weights() const { return {lambda, gamma, delta, tau}; }
    RenderSettings render_settings() const {
        RenderSettings s;
        s.background = background;
        s.threads = threads;
        return s;
    }
    void validate() const {
        if (soft_start_iter > total_iters && soft_reg)
            ;  // allowed: equivalent to disabling the soft term
        if (patch_min < 2 || patch_max < patch_min)
            throw ValidationError("config: patch range must satisfy 2 <= patch_min <= patch_max");
        if (total_iters < 0) throw ValidationError("config: total_iters must be >= 0");
        if (!(tau > 0 && tau < 1)) throw ValidationError("config: tau must be in (0, 1)");
        if (lr_center <= 0 || lr_scale <= 0 || lr_rotation <= 0 || lr_opacity <= 0 ||
            lr_color <= 0 || lr_neural <= 0)
            throw ValidationError("config: learning rates must be positive");
        if (init_primitives == 0) throw ValidationError("config: init_primitives must be >= 1");
    }
};

// --------------------------------------------------------------------------
// Key/value config text.
// --------------------------------------------------------------------------

inline std::string print_config(const TrainConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "total_iters = " << c.total_iters << "\n";
    os << "soft_start_iter = " << c.soft_start_iter << "\n";
    os << "gamma = " << c.gamma << "\n";
    os << "tau = " << c.tau << "\n";
    os << "lambda = " << c.lambda << "\n";
    os << "delta = " << c.delta << "\n";
    os << "patch_min = " << c.patch_min << "\n";
    os << "patch_max = " << c.patch_max << "\n";
    os << "lr_center = " << c.lr_center << "\n";
    os << "lr_center_final = " << c.lr_center_final << "\n";
    os << "lr_scale = " << c.lr_scale << "\n";
    os << "lr_rotation = " << c.lr_rotation << "\n";
    os << "lr_opacity = " << c.lr_opacity << "\n";
    os << "lr_color = " << c.lr_color << "\n";
    os << "lr_neural = " << c.lr_neural << "\n";
    os << "densify_interval = " << c.densify_interval << "\n";
    os << "densify_start = " << c.densify_start << "\n";
    os << "densify_stop = " << c.densify_stop << "\n";
    os << "densify_grad_threshold = " << c.densify_grad_threshold << "\n";
    os << "prune_opacity = " << c.prune_opacity << "\n";
    os << "split_scale_factor = " << c.split_scale_factor << "\n";
    os << "densify_size_rel = " << c.densify_size_rel << "\n";
    os << "max_primitives = " << c.max_primitives << "\n";
    os << "seed = " << c.seed << "\n";
    os << "threads = " << c.threads << "\n";
    os << "background = " << c.background.x() << "," << c.background.y() << "," << c.background.z() << "\n";
    os << "init_primitives = " << c.init_primitives << "\n";
    os << "eval_interval = " << c.eval_interval << "\n";
    os << "view_sampling = " << (c.view_sampling == ViewSampling::Random ? "random" : "roundrobin") << "\n";
    os << "depth_reg_views = " << c.depth_reg_views << "\n";
    os << "hard_reg = " << (c.hard_reg ? "true" : "false") << "\n";
    os << "soft_reg = " << (c.soft_reg ? "true" : "false") << "\n";
    os << "local_norm = " << (c.local_norm ? "true" : "false") << "\n";
    os << "global_norm = " << (c.global_norm ? "true" : "false") << "\n";
    os << "shape_freeze = " << (c.shape_freeze ? "true" : "false") << "\n";
    os << "center_freeze = " << (c.center_freeze ? "true" : "false") << "\n";
    os << "color_mode = " << (c.color_mode == ColorMode::Neural ? "neural" : "sh") << "\n";
    os << "sh_degree = " << c.sh_degree << "\n";
    os << "hash_levels = " << c.neural.grid.levels << "\n";
    os << "hash_base_resolution = " << c.neural.grid.base_resolution << "\n";
    os << "hash_max_resolution = " << c.neural.grid.max_resolution << "\n";
    os << "hash_log2_table_size = " << c.neural.grid.log2_table_size << "\n";
    os << "hash_features = " << c.neural.grid.features_per_entry << "\n";
    os << "mlp_width = " << c.neural.mlp_width << "\n";
    os << "stage_a_layers = " << c.neural.stage_a_layers << "\n";
    os << "stage_b_layers = " << c.neural.stage_b_layers << "\n";
    os << "dir_sh_degree = " << c.neural.dir_sh_degree << "\n";
    return os.str();
}

inline TrainConfig parse_config(const std::string& text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    auto parse_bool = [](const std::string& v, const std::string& key) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ValidationError("config: boolean expected for " + key);
    };
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos)
                throw ValidationError("config: malformed line " + std::to_string(lineno));
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "total_iters") c.total_iters = std::stoll(val);
            else if (key == "soft_start_iter") c.soft_start_iter = std::stoll(val);
            else if (key == "gamma") c.gamma = std::stod(val);
            else if (key == "tau") c.tau = std::stod(val);
            else if (key == "lambda") c.lambda = std::stod(val);
            else if (key == "delta") c.delta = std::stod(val);
            else if (key == "patch_min") c.patch_min = std::stoi(val);
            else if (key == "patch_max") c.patch_max = std::stoi(val);
            else if (key == "lr_center") c.lr_center = std::stod(val);
            else if (key == "lr_center_final") c.lr_center_final = std::stod(val);
            else if (key == "lr_scale") c.lr_scale = std::stod(val);
            else if (key == "lr_rotation") c.lr_rotation = std::stod(val);
            else if (key == "lr_opacity") c.lr_opacity = std::stod(val);
            else if (key == "lr_color") c.lr_color = std::stod(val);
            else if (key == "lr_neural") c.lr_neural = std::stod(val);
            else if (key == "densify_interval") c.densify_interval = std::stoll(val);
            else if (key == "densify_start") c.densify_start = std::stoll(val);
            else if (key == "densify_stop") c.densify_stop = std::stoll(val);
            else if (key == "densify_grad_threshold") c.densify_grad_threshold = std::stod(val);
            else if (key == "prune_opacity") c.prune_opacity = std::stod(val);
            else if (key == "split_scale_factor") c.split_scale_factor = std::stod(val);
            else if (key == "densify_size_rel") c.densify_size_rel = std::stod(val);
            else if (key == "max_primitives") c.max_primitives = std::stoull(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "threads") c.threads = std::stoi(val);
            else if (key == "background") {
                std::istringstream vs(val);
                std::string part;
                for (int a = 0; a < 3 && std::getline(vs, part, ','); ++a) c.background[a] = std::stod(part);
            }
            else if (key == "init_primitives") c.init_primitives = std::stoull(val);
            else if (key == "eval_interval") c.eval_interval = std::stoll(val);
            else if (key == "view_sampling") {
                if (val == "random") c.view_sampling = ViewSampling::Random;
                else if (val == "roundrobin") c.view_sampling = ViewSampling::RoundRobin;
                else throw ValidationError("config: view_sampling must be random or roundrobin");
            }
            else if (key == "depth_reg_views") c.depth_reg_views = std::stoi(val);
            else if (key == "hard_reg") c.hard_reg = parse_bool(val, key);
            else if (key == "soft_reg") c.soft_reg = parse_bool(val, key);
            else if (key == "local_norm") c.local_norm = parse_bool(val, key);
            else if (key == "global_norm") c.global_norm = parse_bool(val, key);
            else if (key == "shape_freeze") c.shape_freeze = parse_bool(val, key);
            else if (key == "center_freeze") c.center_freeze = parse_bool(val, key);
            else if (key == "color_mode") {
                if (val == "neural") c.color_mode = ColorMode::Neural;
                else if (val == "sh") c.color_mode = ColorMode::Sh;
                else throw ValidationError("config: color_mode must be neural or sh");
            }
            else if (key == "sh_degree") c.sh_degree = std::stoi(val);
            else if (key == "hash_levels") c.neural.grid.levels = std::stoi(val);
            else if (key == "hash_base_resolution") c.neural.grid.base_resolution = std::stoi(val);
            else if (key == "hash_max_resolution") c.neural.grid.max_resolution = std::stoi(val);
            else if (key == "hash_log2_table_size") c.neural.grid.log2_table_size = std::stoi(val);
            else if (key == "hash_features") c.neural.grid.features_per_entry = std::stoi(val);
            else if (key == "mlp_width") c.neural.mlp_width = std::stoi(val);
            else if (key == "stage_a_layers") c.neural.stage_a_layers = std::stoi(val);
            else if (key == "stage_b_layers") c.neural.stage_b_layers = std::stoi(val);
            else if (key == "dir_sh_degree") c.neural.dir_sh_degree = std::stoi(val);
            else throw ValidationError("config: unknown key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw ValidationError("config: bad value for '" + key + "' on line " + std::to_string(lineno));
        } catch (const std::out_of_range&) {
            throw ValidationError("config: value out of range for '" + key + "'");
        }
        if (c.sh_degree < 0 || c.sh_degree > 3)
            throw ValidationError("config: sh_degree must be in [0, 3]");
    }
    c.validate();
    return c;
}

inline uint64_t config_hash(const TrainConfig& c) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : print_config(c)) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

// --------------------------------------------------------------------------
// Moment-based adaptive updates (Adam).
// --------------------------------------------------------------------------

struct AdamBuf {
    std::vector<double> m, v;
    void resize(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

namespace detail {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

inline double adam_delta(AdamBuf& b, size_t i, double g, double lr, double bc1, double bc2) {
    b.m[i] = kAdamBeta1 * b.m[i] + (1 - kAdamBeta1) * g;
    b.v[i] = kAdamBeta2 * b.v[i] + (1 - kAdamBeta2) * g * g;
    return lr * (b.m[i] / bc1) / (std::sqrt(b.v[i] / bc2) + kAdamEps);
}

}  // namespace detail

struct AdamState {
    AdamBuf center, log_scale, rotation, opacity, color;
    AdamBuf stage_a, stage_b;
    std::map<int64_t, std::pair<double, double>> table;  // sparse moments for hash entries
    int64_t step_count = 0;

    void resize_field(size_t n, int feature_dim) {
        center.resize(n * 3);
        log_scale.resize(n * 3);
        rotation.resize(n * 4);
        opacity.resize(n);
        color.resize(n * static_cast<size_t>(feature_dim));
    }
};

// --------------------------------------------------------------------------
// Training state and step.
// --------------------------------------------------------------------------

struct TrainState {
    GaussianField field;
    NeuralColorState neural;  // used only in neural color mode
    AdamState adam;
    int64_t iter = 0;
    std::vector<double> densify_grad_accum;
    std::vector<int32_t> densify_count;
    std::mt19937_64 rng;
    double scene_extent = 1.0;

    NeuralColorState* neural_ptr() { return field.color_mode == ColorMode::Neural ? &neural : nullptr; }
    const NeuralColorState* neural_ptr() const {
        return field.color_mode == ColorMode::Neural ? &neural : nullptr;
    }
};

struct StepStats {
    double loss = 0, loss_color = 0, r_hard = 0, r_soft = 0;
    bool soft_active = false;
    double hard_center_grad_norm = 0;   // max-norm of the hard term's center gradients
    double soft_opacity_grad_norm = 0;  // max-norm of the soft term's opacity gradients
    size_t n_primitives = 0;
    int patch_size = 0;
};

inline TrainState init_train_state(const TrainConfig& config, const Aabb& scene_box) {
    config.validate();
    TrainState st;
    st.field = init_random(config.init_primitives, scene_box, config.seed, config.color_mode,
                           config.sh_degree);
    if (config.color_mode == ColorMode::Neural) {
        st.neural.cfg = config.neural;
        st.neural.init(config.seed + 100, scene_box.padded(0.1));
    }
    st.adam.resize_field(st.field.size(), st.field.feature_dim());
    st.adam.stage_a.resize(st.neural.stage_a.weights.size());
    st.adam.stage_b.resize(st.neural.stage_b.weights.size());
    st.densify_grad_accum.assign(st.field.size(), 0.0);
    st.densify_count.assign(st.field.size(), 0);
    st.rng.seed(config.seed + 1);
    st.scene_extent = scene_box.diagonal();
    return st;
}

namespace detail {

// Depth regularization with switchable global/local terms (the canonical op
// keeps both).
inline double depth_reg_value(const DepthMap& rendered, const DepthMap& mono,
                              const PatchGrid& grid, const LossWeights& w, bool use_global,
                              bool use_local) {
    double r = 0;
    if (use_global)
        r += tolerant_l2(normalize_global(rendered, grid), normalize_global(mono, grid), w.delta);
    if (use_local)
        r += w.gamma * tolerant_l2(normalize_local(rendered, grid, epsilon_for(rendered)),
                                   normalize_local(mono, grid, epsilon_for(mono)), w.delta);
    return r;
}

inline std::vector<double> depth_reg_vjp(const DepthMap& rendered, const DepthMap& mono,
                                         const PatchGrid& grid, const LossWeights& w,
                                         bool use_global, bool use_local) {
    std::vector<double> grad(rendered.pixel_count(), 0.0);
    if (use_global) {
        const auto gn_r = normalize_global(rendered, grid);
        const auto gn_m = normalize_global(mono, grid);
        const auto u = tolerant_l2_grad_a(gn_r, gn_m, w.delta);
        const auto g = normalize_global_vjp(rendered, grid, u);
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    }
    if (use_local) {
        const auto ln_r = normalize_local(rendered, grid, epsilon_for(rendered));
        const auto ln_m = normalize_local(mono, grid, epsilon_for(mono));
        auto u = tolerant_l2_grad_a(ln_r, ln_m, w.delta);
        for (auto& v : u) v *= w.gamma;
        const auto g = normalize_local_vjp(rendered, grid, u);
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    }
    return grad;
}

inline double max_abs(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline double max_abs3(const std::vector<Vec3>& v) {
    double m = 0;
    for (const auto& x : v) m = std::max(m, x.cwiseAbs().maxCoeff());
    return m;
}

}  // namespace detail

// One optimization step on a single training view: color supervision with
// full gradients, hard depth with the shape groups frozen, soft depth (from
// soft_start_iter on) training opacity alone, one summed adaptive update.
inline StepStats train_step(TrainState& st, const View& view, const TrainConfig& config) {
    if (view.image.width != view.camera.width || view.image.height != view.camera.height)
        throw ValidationError("train_step: image and camera dimensions differ");
    const RenderSettings settings = config.render_settings();
    const LossWeights weights = config.weights();
    StepStats stats;
    stats.n_primitives = st.field.size();

    ParamGrads total(st.field.size(), st.field.feature_dim());
    ParamGrads color_grads(0);

    // Color pass.
    {
        const auto colors = compute_colors(st.field, st.neural_ptr(), view.camera);
        const auto img = render_color(st.field, view.camera, colors, settings);
        stats.loss_color = color_loss(img, view.image, weights.lambda);
        const auto upstream = color_loss_vjp(img, view.image, weights.lambda);
        color_grads = vjp_render(RenderKind::color(), st.field, st.neural_ptr(), view.camera,
                                 upstream, FreezeMask{}, settings);
        total.add_scaled(color_grads, 1.0);
    }

    // Depth regularization passes share the sampled patch grid.
    const bool wants_depth = (config.hard_reg || config.soft_reg) &&
                             (config.global_norm || config.local_norm);
    if (wants_depth) {
        if (!view.depth_mono)
            throw ValidationError("train_step: depth regularization requested but view '" +
                                  view.name + "' has no mono depth");
        std::uniform_int_distribution<int> pdist(config.patch_min, config.patch_max);
        stats.patch_size = pdist(st.rng);
        const PatchGrid grid = partition(view.camera.width, view.camera.height, stats.patch_size);

        if (config.hard_reg) {
            const auto hard = render_hard_depth(st.field, view.camera, weights.tau, settings);
            stats.r_hard = detail::depth_reg_value(hard, *view.depth_mono, grid, weights,
                                                   config.global_norm, config.local_norm);
            const auto upstream = detail::depth_reg_vjp(hard, *view.depth_mono, grid, weights,
                                                        config.global_norm, config.local_norm);
            FreezeMask mask;
            mask.scale = mask.rotation = config.shape_freeze;
            const auto g = vjp_render(RenderKind::hard_depth(weights.tau), st.field, nullptr,
                                      view.camera, upstream, mask, settings);
            stats.hard_center_grad_norm = detail::max_abs3(g.center);
            total.add_scaled(g, 1.0);
        }

        stats.soft_active = config.soft_reg && st.iter >= config.soft_start_iter;
        if (stats.soft_active) {
            const auto soft = render_soft_depth(st.field, view.camera, settings);
            stats.r_soft = detail::depth_reg_value(soft, *view.depth_mono, grid, weights,
                                                   config.global_norm, config.local_norm);
            const auto upstream = detail::depth_reg_vjp(soft, *view.depth_mono, grid, weights,
                                                        config.global_norm, config.local_norm);
            // With both freezes active this is the canonical soft-depth
            // contract; the ablations lift individual freezes by rendering
            // plain expected depth with a partial mask.
            ParamGrads g(0);
            if (config.center_freeze && config.shape_freeze) {
                g = vjp_render(RenderKind::soft_depth(), st.field, nullptr, view.camera, upstream,
                               FreezeMask{}, settings);
            } else {
                FreezeMask mask;
                mask.center = config.center_freeze;
                mask.scale = mask.rotation = config.shape_freeze;
                g = vjp_render(RenderKind::depth(), st.field, nullptr, view.camera, upstream, mask,
                               settings);
            }
            stats.soft_opacity_grad_norm = detail::max_abs(g.opacity_logit);
            total.add_scaled(g, 1.0);
        }
    }

    stats.loss = total_loss(stats.loss_color, stats.r_hard, stats.r_soft);
    if (!std::isfinite(stats.loss)) {
        std::ostringstream os;
        os << "train_step: non-finite loss at iter " << st.iter << " (color=" << stats.loss_color
           << ", hard=" << stats.r_hard << ", soft=" << stats.r_soft
           << ", primitives=" << st.field.size() << ")";
        throw NumericalError(os.str());
    }

    // Single summed update per step.
    st.adam.step_count++;
    const double bc1 = 1 - std::pow(detail::kAdamBeta1, static_cast<double>(st.adam.step_count));
    const double bc2 = 1 - std::pow(detail::kAdamBeta2, static_cast<double>(st.adam.step_count));
    const double t01 = config.total_iters > 0
                           ? static_cast<double>(st.iter) / static_cast<double>(config.total_iters)
                           : 0.0;
    // Center rate is expressed in scene-normalized units and scaled by the
    // scene extent, with exponential decay over the run.
    const double lr_center = config.lr_center * st.scene_extent *
                             std::pow(config.lr_center_final / config.lr_center, t01);
    for (size_t i = 0; i < st.field.size(); ++i) {
        auto& prim = st.field.primitives[i];
        for (int a = 0; a < 3; ++a) {
            prim.center[a] -= detail::adam_delta(st.adam.center, i * 3 + a, total.center[i][a],
                                                 lr_center, bc1, bc2);
            prim.log_scale[a] -= detail::adam_delta(st.adam.log_scale, i * 3 + a,
                                                    total.log_scale[i][a], config.lr_scale, bc1, bc2);
        }
        for (int a = 0; a < 4; ++a)
            prim.rotation[a] -= detail::adam_delta(st.adam.rotation, i * 4 + a, total.rotation[i][a],
                                                   config.lr_rotation, bc1, bc2);
        prim.opacity_logit -= detail::adam_delta(st.adam.opacity, i, total.opacity_logit[i],
                                                 config.lr_opacity, bc1, bc2);
        const int k = st.field.feature_dim();
        for (int a = 0; a < k; ++a)
            prim.color_params[a] -= detail::adam_delta(st.adam.color, i * k + a,
                                                       total.color_params[i][a], config.lr_color,
                                                       bc1, bc2);
    }
    if (st.field.color_mode == ColorMode::Neural) {
        for (size_t i = 0; i < st.neural.stage_a.weights.size(); ++i)
            st.neural.stage_a.weights[i] -= detail::adam_delta(
                st.adam.stage_a, i, total.neural.stage_a.empty() ? 0.0 : total.neural.stage_a[i],
                config.lr_neural, bc1, bc2);
        for (size_t i = 0; i < st.neural.stage_b.weights.size(); ++i)
            st.neural.stage_b.weights[i] -= detail::adam_delta(
                st.adam.stage_b, i, total.neural.stage_b.empty() ? 0.0 : total.neural.stage_b[i],
                config.lr_neural, bc1, bc2);
        // Hash entries update sparsely: only entries touched this step.
        for (const auto& [idx, g] : total.neural.table) {
            auto& mv = st.adam.table[idx];
            mv.first = detail::kAdamBeta1 * mv.first + (1 - detail::kAdamBeta1) * g;
            mv.second = detail::kAdamBeta2 * mv.second + (1 - detail::kAdamBeta2) * g * g;
            st.neural.encoder.table[static_cast<size_t>(idx)] -=
                config.lr_neural * (mv.first / bc1) / (std::sqrt(mv.second / bc2) + detail::kAdamEps);
        }
        st.neural.invalidate();
    }

    // Densification statistics from the color pass's screen-space gradients.
    for (size_t i = 0; i < st.field.size(); ++i) {
        if (color_grads.visible[i]) {
            st.densify_grad_accum[i] += color_grads.screen_pos[i].norm();
            st.densify_count[i]++;
        }
    }

    st.iter++;
    return stats;
}

// Clone/split primitives whose accumulated screen-space gradient is large,
// prune primitives with negligible opacity, keep optimizer moments aligned.
inline void densify_and_prune(TrainState& st, const TrainConfig& config) {
    const size_t n = st.field.size();
    const double size_threshold = config.densify_size_rel * st.scene_extent;
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<GaussianPrimitive> out;
    out.reserve(n + n / 4);
    std::vector<int64_t> src;  // index of the moment source, -1 for fresh entries
    src.reserve(out.capacity());

    auto sample_offset = [&](const GaussianPrimitive& p) {
        const Vec3 scale = p.scale();
        const Vec3 nvec(gauss(st.rng), gauss(st.rng), gauss(st.rng));
        const Mat3 rot = rotation_from_quaternion(p.rotation.normalized());
        return Vec3(rot * scale.cwiseProduct(nvec));
    };

    size_t cloned = 0, split = 0, pruned = 0;
    for (size_t i = 0; i < n; ++i) {
        const auto& prim = st.field.primitives[i];
        if (prim.opacity() < config.prune_opacity) {
            pruned++;
            continue;
        }
        const double mean_grad =
            st.densify_count[i] > 0 ? st.densify_grad_accum[i] / st.densify_count[i] : 0.0;
        const bool active = mean_grad > config.densify_grad_threshold &&
                            st.field.size() + cloned + split < config.max_primitives;
        if (!active) {
            out.push_back(prim);
            src.push_back(static_cast<int64_t>(i));
            continue;
        }
        if (prim.scale().maxCoeff() <= size_threshold) {
            // Clone: keep the original, add a shifted copy.
            out.push_back(prim);
            src.push_back(static_cast<int64_t>(i));
            GaussianPrimitive copy = prim;
            copy.center += sample_offset(prim);
            out.push_back(copy);
            src.push_back(-1);
            cloned++;
        } else {
            // Split: two children sampled from the parent, scales shrunk.
            for (int cidx = 0; cidx < 2; ++cidx) {
                GaussianPrimitive child = prim;
                child.center = prim.center + sample_offset(prim);
                child.log_scale = prim.log_scale.array() - std::log(config.split_scale_factor);
                out.push_back(child);
                src.push_back(-1);
            }
            split++;
        }
    }
    if (out.empty()) {
        // Never let pruning empty the field entirely.
        out.push_back(st.field.primitives[0]);
        src.push_back(0);
    }

    AdamState fresh;
    fresh.step_count = st.adam.step_count;
    fresh.table = std::move(st.adam.table);
    fresh.stage_a = std::move(st.adam.stage_a);
    fresh.stage_b = std::move(st.adam.stage_b);
    const int k = st.field.feature_dim();
    fresh.resize_field(out.size(), k);
    auto copy_group = [&](AdamBuf& dst, const AdamBuf& srcbuf, int dim) {
        for (size_t j = 0; j < out.size(); ++j) {
            if (src[j] < 0) continue;
            for (int a = 0; a < dim; ++a) {
                dst.m[j * dim + a] = srcbuf.m[static_cast<size_t>(src[j]) * dim + a];
                dst.v[j * dim + a] = srcbuf.v[static_cast<size_t>(src[j]) * dim + a];
            }
        }
    };
    copy_group(fresh.center, st.adam.center, 3);
    copy_group(fresh.log_scale, st.adam.log_scale, 3);
    copy_group(fresh.rotation, st.adam.rotation, 4);
    copy_group(fresh.opacity, st.adam.opacity, 1);
    if (k > 0) copy_group(fresh.color, st.adam.color, k);

    st.field.primitives = std::move(out);
    st.adam = std::move(fresh);
    st.densify_grad_accum.assign(st.field.size(), 0.0);
    st.densify_count.assign(st.field.size(), 0);
    if (st.field.color_mode == ColorMode::Neural) st.neural.invalidate();
    (void)cloned;
    (void)split;
    (void)pruned;
}

// --------------------------------------------------------------------------
// Full training run.
// --------------------------------------------------------------------------

struct FitLogEntry {
    int64_t iter = 0;
    double loss = 0;
    Metrics test;
};

struct FitResult {
    TrainState state;
    std::vector<FitLogEntry> log;
};

// Hex-exact serialization of the metric log, used by determinism checks.
inline std::string log_to_string(const std::vector<FitLogEntry>& log) {
    std::ostringstream os;
    os << std::hexfloat;
    for (const auto& e : log)
        os << e.iter << " " << e.loss << " " << e.test.psnr << " " << e.test.ssim << " "
           << e.test.depth_mae << " " << e.test.depth_rmse << "\n";
    return os.str();
}

inline FitResult fit(const TrainConfig& config, const Dataset& dataset) {
    if (dataset.train.empty()) throw ValidationError("fit: dataset has no training views");
    config.validate();

    FitResult result;
    result.state = init_train_state(config, dataset.bbox);
    TrainState& st = result.state;
    const RenderSettings settings = config.render_settings();

    std::uniform_int_distribution<size_t> vdist(0, dataset.train.size() - 1);
    double last_loss = 0;
    for (int64_t i = 0; i < config.total_iters; ++i) {
        const size_t vi = config.view_sampling == ViewSampling::Random
                              ? vdist(st.rng)
                              : static_cast<size_t>(i) % dataset.train.size();
        const auto stats = train_step(st, dataset.train[vi], config);
        last_loss = stats.loss;

        const int64_t done = i + 1;
        if (config.densify_interval > 0 && done >= config.densify_start &&
            done <= config.densify_stop && done % config.densify_interval == 0) {
            densify_and_prune(st, config);
        }
        if ((config.eval_interval > 0 && done % config.eval_interval == 0) ||
            done == config.total_iters) {
            FitLogEntry entry;
            entry.iter = done;
            entry.loss = last_loss;
            if (!dataset.test.empty())
                entry.test = evaluate(st.field, st.neural_ptr(), dataset.test, settings).mean;
            result.log.push_back(entry);
        }
    }
    if (config.total_iters == 0) {
        FitLogEntry entry;
        entry.iter = 0;
        if (!dataset.test.empty())
            entry.test = evaluate(st.field, st.neural_ptr(), dataset.test, settings).mean;
        result.log.push_back(entry);
    }
    return result;
}

// --------------------------------------------------------------------------
// Full-objective value/gradient with every parameter path live (no freezes,
// no detachment): color + hard + soft terms as one differentiable function.
// Used by the gradient checker.
// --------------------------------------------------------------------------

struct Objective {
    ImageBuffer gt;
    DepthMap mono;
    PatchGrid grid;
    LossWeights weights;
    RenderSettings settings;
    bool include_hard = true;
    bool include_soft = true;
};

inline double objective_value(const GaussianField& field, const NeuralColorState* neural,
                              const Camera& cam, const Objective& obj) {
    const auto colors = compute_colors(field, neural, cam);
    const auto img = render_color(field, cam, colors, obj.settings);
    double loss = color_loss(img, obj.gt, obj.weights.lambda);
    if (obj.include_hard) {
        const auto hard = render_hard_depth(field, cam, obj.weights.tau, obj.settings);
        loss += depth_regularization(hard, obj.mono, obj.grid, obj.weights);
    }
    if (obj.include_soft) {
        const auto soft = render_depth(field, cam, obj.settings);
        loss += depth_regularization(soft, obj.mono, obj.grid, obj.weights);
    }
    return loss;
}

inline ParamGrads objective_grads(const GaussianField& field, const NeuralColorState* neural,
                                  const Camera& cam, const Objective& obj) {
    ParamGrads total(field.size(), field.feature_dim());
    {
        const auto colors = compute_colors(field, neural, cam);
        const auto img = render_color(field, cam, colors, obj.settings);
        const auto upstream = color_loss_vjp(img, obj.gt, obj.weights.lambda);
        total.add_scaled(
            vjp_render(RenderKind::color(), field, neural, cam, upstream, FreezeMask{}, obj.settings),
            1.0);
    }
    if (obj.include_hard) {
        const auto hard = render_hard_depth(field, cam, obj.weights.tau, obj.settings);
        const auto upstream = depth_regularization_vjp(hard, obj.mono, obj.grid, obj.weights);
        total.add_scaled(vjp_render(RenderKind::hard_depth(obj.weights.tau), field, nullptr, cam,
                                    upstream, FreezeMask{}, obj.settings),
                         1.0);
    }
    if (obj.include_soft) {
        const auto soft = render_depth(field, cam, obj.settings);
        const auto upstream = depth_regularization_vjp(soft, obj.mono, obj.grid, obj.weights);
        total.add_scaled(vjp_render(RenderKind::depth(), field, nullptr, cam, upstream, FreezeMask{},
                                    obj.settings),
                         1.0);
    }
    return total;
}

}  // namespace dsplat
