// Command-line front end: synthetic dataset generation, training, rendering,
// evaluation, and gradient verification.

#include "dsplat/gradcheck.hpp"
#include "dsplat/harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw dsplat::ValidationError("cannot open '" + path + "'");
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

json metrics_to_json(const dsplat::Metrics& m) {
    return json{{"psnr", m.psnr},
                {"ssim", m.ssim},
                {"depth_mae", m.depth_mae},
                {"depth_rmse", m.depth_rmse},
                {"depth_pixels", m.depth_pixels}};
}

int run_synth(const std::string& spec_path, uint64_t seed, const std::string& out_dir) {
    dsplat::SceneSpec spec;
    if (!spec_path.empty()) spec = dsplat::parse_scene_spec(slurp(spec_path));
    const auto synth = dsplat::synth_scene(spec, seed);
    fs::create_directories(out_dir);
    dsplat::save_dataset(synth.dataset, out_dir);
    dsplat::write_ply((fs::path(out_dir) / "gt_field.ply").string(), synth.gt_field);
    std::ofstream os(fs::path(out_dir) / "scene_spec.txt");
    os << dsplat::print_scene_spec(spec);
    std::cout << "wrote " << synth.dataset.train.size() << " train / " << synth.dataset.test.size()
              << " test views to " << out_dir << "\n";
    return kExitOk;
}

int run_train(CLI::App* cmd) {
    const std::string data = cmd->get_option("--data")->as<std::string>();
    const std::string config_path = cmd->get_option("--config")->as<std::string>();
    const std::string out_dir = cmd->get_option("--out")->as<std::string>();
    const std::string color_mode = cmd->get_option("--color-mode")->as<std::string>();
    const bool print_only = cmd->get_option("--print-config")->as<bool>();

    dsplat::TrainConfig config;
    if (!config_path.empty()) config = dsplat::parse_config(slurp(config_path));
    if (cmd->get_option("--no-hard")->as<bool>()) config.hard_reg = false;
    if (cmd->get_option("--no-soft")->as<bool>()) config.soft_reg = false;
    if (cmd->get_option("--no-local-norm")->as<bool>()) config.local_norm = false;
    if (cmd->get_option("--no-global-norm")->as<bool>()) config.global_norm = false;
    if (cmd->get_option("--no-shape-freeze")->as<bool>()) config.shape_freeze = false;
    if (cmd->get_option("--no-center-freeze")->as<bool>()) config.center_freeze = false;
    if (cmd->get_option("--seed")->count()) config.seed = cmd->get_option("--seed")->as<uint64_t>();
    if (cmd->get_option("--iters")->count())
        config.total_iters = cmd->get_option("--iters")->as<int64_t>();
    if (!color_mode.empty()) {
        if (color_mode == "neural") {
            config.color_mode = dsplat::ColorMode::Neural;
        } else if (color_mode.rfind("sh:", 0) == 0) {
            config.color_mode = dsplat::ColorMode::Sh;
            config.sh_degree = std::stoi(color_mode.substr(3));
            if (config.sh_degree < 0 || config.sh_degree > 3)
                throw dsplat::ValidationError("--color-mode sh:<deg> needs deg in [0, 3]");
        } else {
            throw dsplat::ValidationError("--color-mode must be sh:<deg> or neural");
        }
    }
    config.validate();

    if (print_only) {
        std::cout << dsplat::print_config(config);
        return kExitOk;
    }
    if (data.empty() || out_dir.empty())
        throw dsplat::ValidationError("train: --data and --out are required");

    const auto dataset = dsplat::load_dataset(data);
    if ((config.hard_reg || config.soft_reg)) {
        for (const auto& v : dataset.train)
            if (!v.depth_mono)
                throw dsplat::ValidationError(
                    "train: depth regularization requested but view '" + v.name +
                    "' has no mono depth map");
    }

    const auto result = dsplat::fit(config, dataset);

    fs::create_directories(out_dir);
    dsplat::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), result.state,
                            dsplat::config_hash(config));
    {
        std::ofstream os(fs::path(out_dir) / "config.txt");
        os << dsplat::print_config(config);
    }
    json log = json::array();
    for (const auto& e : result.log) {
        json entry = metrics_to_json(e.test);
        entry["iter"] = e.iter;
        entry["loss"] = e.loss;
        log.push_back(entry);
    }
    std::ofstream os(fs::path(out_dir) / "metrics.json");
    os << log.dump(2) << "\n";
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        std::cout << "iter " << last.iter << "  psnr " << last.test.psnr << "  ssim "
                  << last.test.ssim << "  depth_mae " << last.test.depth_mae << "\n";
    }
    std::cout << "checkpoint: " << (fs::path(out_dir) / "checkpoint.bin").string() << "\n";
    return kExitOk;
}

int run_render(const std::string& ckpt, const std::string& camera_path, const std::string& out_png,
               const std::string& out_depth) {
    const auto loaded = dsplat::load_checkpoint(ckpt);
    const auto cam = dsplat::load_camera(camera_path);
    const auto* neural = loaded.state.neural_ptr();
    const auto colors = dsplat::compute_colors(loaded.state.field, neural, cam);
    const auto img = dsplat::render_color(loaded.state.field, cam, colors);
    dsplat::write_png(out_png, img);
    if (!out_depth.empty()) {
        const auto depth = dsplat::render_depth(loaded.state.field, cam);
        dsplat::write_depth_pfm(out_depth, depth);
    }
    std::cout << "rendered " << cam.width << "x" << cam.height << " to " << out_png << "\n";
    return kExitOk;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& report_path) {
    const auto loaded = dsplat::load_checkpoint(ckpt);
    const auto dataset = dsplat::load_dataset(data);
    const auto& views = dataset.test.empty() ? dataset.train : dataset.test;
    const auto summary = dsplat::evaluate(loaded.state.field, loaded.state.neural_ptr(), views);
    json report;
    report["mean"] = metrics_to_json(summary.mean);
    json per_view = json::array();
    for (size_t i = 0; i < summary.per_view.size(); ++i) {
        json e = metrics_to_json(summary.per_view[i]);
        e["view"] = views[i].name;
        per_view.push_back(e);
    }
    report["views"] = per_view;
    std::ofstream os(report_path);
    if (!os) throw dsplat::ValidationError("eval: cannot write report '" + report_path + "'");
    os << report.dump(2) << "\n";
    std::cout << "psnr " << summary.mean.psnr << "  ssim " << summary.mean.ssim << "  depth_mae "
              << summary.mean.depth_mae << "\n";
    return kExitOk;
}

int run_gradcheck(uint64_t seed, int size, int prims) {
    if (size < 4 || prims < 1) throw dsplat::ValidationError("gradcheck: size >= 4, prims >= 1");
    const auto field = dsplat::gradcheck_scene(static_cast<size_t>(prims), seed, 1);
    const auto cam = dsplat::gradcheck_camera(size);
    const size_t npix = static_cast<size_t>(size) * size;
    const double rel_tol = 1e-4, abs_tol = 1e-7;

    bool ok = true;
    const std::pair<const char*, dsplat::RenderKind> kinds[] = {
        {"color", dsplat::RenderKind::color()},
        {"depth", dsplat::RenderKind::depth()},
        {"hard_depth", dsplat::RenderKind::hard_depth(0.95)},
        {"soft_depth", dsplat::RenderKind::soft_depth()},
    };
    for (const auto& [name, kind] : kinds) {
        const dsplat::WeightedSumLoss loss(
            kind.tag == dsplat::RenderKind::Tag::Color ? npix * 3 : npix, seed ^ 0x9e3779b9);
        const auto rep = dsplat::finite_diff_check(field, nullptr, cam, kind, loss, 1e-5);
        const bool pass = rep.pass(rel_tol, abs_tol);
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << name;
        for (const auto& g : rep.groups)
            std::cout << "  " << g.name << " rel=" << g.max_rel_err << " abs=" << g.max_abs_err;
        std::cout << "\n";
    }
    return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"differentiable Gaussian-splatting reconstruction toolkit"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic sparse-view dataset");
    std::string synth_spec, synth_out;
    uint64_t synth_seed = 0;
    synth->add_option("--spec", synth_spec, "scene spec file (key = value)");
    synth->add_option("--seed", synth_seed, "random seed")->default_val(0);
    synth->add_option("--out", synth_out, "output dataset directory")->required();

    auto* train = app.add_subcommand("train", "optimize a Gaussian field on a dataset");
    std::string t_data, t_config, t_out, t_color_mode;
    uint64_t t_seed = 0;
    int64_t t_iters = 0;
    train->add_option("--data", t_data, "dataset directory");
    train->add_option("--config", t_config, "config file (key = value)");
    train->add_option("--out", t_out, "output directory");
    train->add_option("--seed", t_seed, "override config seed");
    train->add_option("--iters", t_iters, "override config total_iters");
    train->add_option("--color-mode", t_color_mode, "sh:<deg> or neural");
    train->add_flag("--no-hard", "disable hard depth regularization");
    train->add_flag("--no-soft", "disable soft depth regularization");
    train->add_flag("--no-local-norm", "drop the local normalization term");
    train->add_flag("--no-global-norm", "drop the global normalization term");
    train->add_flag("--no-shape-freeze", "let depth terms move scale/rotation");
    train->add_flag("--no-center-freeze", "let the soft term move centers");
    train->add_flag("--print-config", "print the resolved config and exit");

    auto* render = app.add_subcommand("render", "render a checkpoint from a camera");
    std::string r_ckpt, r_camera, r_out, r_depth;
    render->add_option("--ckpt", r_ckpt, "checkpoint file")->required();
    render->add_option("--camera", r_camera, "camera JSON file")->required();
    render->add_option("--out", r_out, "output PNG")->required();
    render->add_option("--depth", r_depth, "optional output depth PFM");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
    std::string e_ckpt, e_data, e_report;
    eval->add_option("--ckpt", e_ckpt, "checkpoint file")->required();
    eval->add_option("--data", e_data, "dataset directory")->required();
    eval->add_option("--report", e_report, "output JSON report")->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    uint64_t g_seed = 0;
    int g_size = 16, g_prims = 8;
    gradcheck->add_option("--seed", g_seed, "random seed")->default_val(0);
    gradcheck->add_option("--size", g_size, "image size in pixels")->default_val(16);
    gradcheck->add_option("--prims", g_prims, "primitive count")->default_val(8);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    try {
        if (synth->parsed()) return run_synth(synth_spec, synth_seed, synth_out);
        if (train->parsed()) return run_train(train);
        if (render->parsed()) return run_render(r_ckpt, r_camera, r_out, r_depth);
        if (eval->parsed()) return run_eval(e_ckpt, e_data, e_report);
        if (gradcheck->parsed()) return run_gradcheck(g_seed, g_size, g_prims);
    } catch (const dsplat::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const dsplat::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitValidation;
}
