#include "dsplat/harness.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>

using namespace dsplat;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("dsplat_test_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& rel = "") const { return (path / rel).string(); }
};

}  // namespace

TEST_CASE("synth: deterministic per seed, identity corruption is bit-exact") {
    SceneSpec spec;
    spec.n_primitives = 120;
    spec.image_size = 24;
    spec.focal = 30;
    const auto a = synth_scene(spec, 9);
    const auto b = synth_scene(spec, 9);
    REQUIRE(a.dataset.train.size() == b.dataset.train.size());
    for (size_t i = 0; i < a.dataset.train.size(); ++i) {
        CHECK(a.dataset.train[i].image.rgb == b.dataset.train[i].image.rgb);
        CHECK(a.dataset.train[i].depth_gt->depth == b.dataset.train[i].depth_gt->depth);
        // (a, b, sigma) = (1, 0, 0): the mono map equals the gt map exactly.
        CHECK(a.dataset.train[i].depth_mono->depth == a.dataset.train[i].depth_gt->depth);
    }
    const auto c = synth_scene(spec, 10);
    CHECK(a.dataset.train[0].image.rgb != c.dataset.train[0].image.rgb);
}

TEST_CASE("synth: affine corruption transforms the gt depth") {
    SceneSpec spec;
    spec.n_primitives = 100;
    spec.image_size = 16;
    spec.focal = 20;
    spec.corrupt_a = 0.5;
    spec.corrupt_b = 3.0;
    const auto s = synth_scene(spec, 4);
    const auto& v = s.dataset.train[0];
    for (size_t i = 0; i < v.depth_gt->depth.size(); ++i) {
        const double expected = static_cast<double>(
            static_cast<float>(0.5 * v.depth_gt->depth[i] + 3.0));
        CHECK(v.depth_mono->depth[i] == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("synth: two textured planes give a bimodal gt depth histogram") {
    SceneSpec spec;
    spec.kind = SceneKind::TexturedPlanes;
    spec.n_planes = 2;
    spec.depth_min = 2.0;
    spec.depth_max = 4.0;
    spec.n_primitives = 500;
    spec.image_size = 32;
    spec.focal = 40;
    const auto s = synth_scene(spec, 6);
    size_t near = 0, far = 0, covered = 0;
    for (const auto& v : s.dataset.train) {
        for (size_t i = 0; i < v.depth_gt->depth.size(); ++i) {
            if (v.depth_gt->accum_alpha[i] < 0.5) continue;
            covered++;
            const double d = v.depth_gt->depth[i];
            if (d > 1.6 && d < 2.6) near++;
            if (d > 3.2 && d < 4.4) far++;
        }
    }
    REQUIRE(covered > 0);
    CHECK(near + far > 0.8 * covered);
    CHECK(near > 0.25 * covered);
    CHECK(far > 0.12 * covered);
}

TEST_CASE("png round trip preserves quantized images") {
    TempDir dir("png");
    ImageBuffer img(17, 9);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.rgb) v = u(rng);
    write_png(dir.str("img.png"), img);
    const auto back = read_png(dir.str("img.png"));
    REQUIRE(back.width == 17);
    REQUIRE(back.height == 9);
    for (size_t i = 0; i < img.rgb.size(); ++i)
        CHECK(std::abs(back.rgb[i] - img.rgb[i]) <= 0.5 / 255.0 + 1e-12);
    // Pre-quantized content survives exactly.
    for (auto& v : img.rgb) v = std::lround(v * 255.0) / 255.0;
    write_png(dir.str("img2.png"), img);
    CHECK(read_png(dir.str("img2.png")).rgb == img.rgb);
}

TEST_CASE("pfm round trip is lossless, big-endian and color rejected") {
    TempDir dir("pfm");
    DepthMap d(7, 5);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 9.0);
    for (auto& v : d.depth) v = static_cast<float>(u(rng));
    write_depth_pfm(dir.str("d.pfm"), d);
    const auto back = read_depth_pfm(dir.str("d.pfm"));
    CHECK(back.depth == d.depth);

    {
        std::ofstream os(dir.str("big.pfm"), std::ios::binary);
        os << "Pf\n2 1\n1.0\n";
        const float vals[2] = {1.f, 2.f};
        os.write(reinterpret_cast<const char*>(vals), sizeof(vals));
    }
    CHECK_THROWS_WITH(read_depth_pfm(dir.str("big.pfm")),
                      Catch::Matchers::ContainsSubstring("big-endian"));
    {
        std::ofstream os(dir.str("color.pfm"), std::ios::binary);
        os << "PF\n1 1\n-1.0\n";
        const float vals[3] = {1.f, 2.f, 3.f};
        os.write(reinterpret_cast<const char*>(vals), sizeof(vals));
    }
    CHECK_THROWS_AS(read_depth_pfm(dir.str("color.pfm")), ValidationError);
    CHECK_THROWS_AS(read_depth_pfm(dir.str("missing.pfm")), ValidationError);
}

TEST_CASE("ply export/import preserves the geometry within float32 rounding") {
    TempDir dir("ply");
    SceneSpec spec;
    spec.n_primitives = 40;
    const auto s = synth_scene(spec, 12);
    write_ply(dir.str("f.ply"), s.gt_field);
    const auto back = read_ply(dir.str("f.ply"));
    REQUIRE(back.size() == s.gt_field.size());
    for (size_t i = 0; i < back.size(); ++i) {
        const auto& orig = s.gt_field.primitives[i];
        const auto& got = back.primitives[i];
        for (int a = 0; a < 3; ++a) {
            CHECK(got.center[a] == Catch::Approx(orig.center[a]).margin(1e-5));
            CHECK(got.scale()[a] == Catch::Approx(orig.scale()[a]).epsilon(1e-5));
        }
        for (int a = 0; a < 4; ++a)
            CHECK(got.rotation[a] ==
                  Catch::Approx(orig.rotation.normalized()[a]).margin(1e-6));
        CHECK(got.opacity() == Catch::Approx(orig.opacity()).epsilon(1e-5));
    }

    GaussianField empty;
    write_ply(dir.str("empty.ply"), empty);
    CHECK(read_ply(dir.str("empty.ply")).size() == 0);
}

TEST_CASE("dataset save/load round trip is exact") {
    TempDir dir("ds");
    SceneSpec spec;
    spec.n_primitives = 80;
    spec.image_size = 16;
    spec.focal = 20;
    spec.corrupt_a = 0.7;
    spec.corrupt_b = 1.0;
    spec.corrupt_sigma = 0.01;
    const auto s = synth_scene(spec, 5);
    save_dataset(s.dataset, dir.str());
    const auto back = load_dataset(dir.str());
    REQUIRE(back.train.size() == s.dataset.train.size());
    REQUIRE(back.test.size() == s.dataset.test.size());
    CHECK(back.bbox.min == s.dataset.bbox.min);
    CHECK(back.bbox.max == s.dataset.bbox.max);
    for (size_t i = 0; i < back.train.size(); ++i) {
        const auto& a = s.dataset.train[i];
        const auto& b = back.train[i];
        CHECK(b.camera.rotation == a.camera.rotation);
        CHECK(b.camera.translation == a.camera.translation);
        CHECK(b.camera.fx == a.camera.fx);
        CHECK(b.image.rgb == a.image.rgb);
        CHECK(b.depth_mono->depth == a.depth_mono->depth);
        CHECK(b.depth_gt->depth == a.depth_gt->depth);
    }
}

TEST_CASE("dataset load failures carry distinct diagnostics") {
    TempDir dir("bad");
    CHECK_THROWS_WITH(load_dataset(dir.str()), Catch::Matchers::ContainsSubstring("manifest"));
    {
        std::ofstream os(dir.str("dataset.json"));
        os << "{ not json";
    }
    CHECK_THROWS_WITH(load_dataset(dir.str()), Catch::Matchers::ContainsSubstring("malformed"));

    SceneSpec spec;
    spec.n_primitives = 30;
    spec.image_size = 12;
    spec.focal = 16;
    spec.train_views = 1;
    spec.test_views = 0;
    const auto s = synth_scene(spec, 2);
    save_dataset(s.dataset, dir.str());
    fs::remove(dir.str("images/train_0.png"));
    CHECK_THROWS_WITH(load_dataset(dir.str()), Catch::Matchers::ContainsSubstring("missing file"));
}

TEST_CASE("evaluate: psnr cap, closed form, and brute-force depth mae") {
    SceneSpec spec;
    spec.n_primitives = 60;
    spec.image_size = 16;
    spec.focal = 20;
    const auto s = synth_scene(spec, 8);

    // A view whose stored image equals the render exactly hits the cap.
    View exact = s.dataset.train[0];
    const auto colors = compute_colors(s.gt_field, nullptr, exact.camera);
    exact.image = render_color(s.gt_field, exact.camera, colors);
    const auto m = evaluate_view(s.gt_field, nullptr, exact);
    CHECK(m.psnr == 99.0);
    CHECK(m.ssim == Catch::Approx(1.0).margin(1e-12));

    // All-black render vs mid-gray truth: -10 log10(0.25).
    ImageBuffer black(8, 8), gray(8, 8);
    for (auto& v : gray.rgb) v = 0.5;
    CHECK(psnr(black, gray) == Catch::Approx(-10.0 * std::log10(0.25)).epsilon(1e-12));

    // Depth MAE equals a direct recomputation.
    const auto random = init_random(50, s.dataset.bbox, 3, ColorMode::Sh, 0);
    const auto& view = s.dataset.train[0];
    const auto got = evaluate_view(random, nullptr, view);
    const auto dm = render_depth(random, view.camera);
    double mae = 0;
    size_t count = 0;
    for (size_t i = 0; i < dm.depth.size(); ++i) {
        if (dm.accum_alpha[i] > 0.5 && view.depth_gt->depth[i] > 0) {
            mae += std::abs(dm.depth[i] - view.depth_gt->depth[i]);
            count++;
        }
    }
    if (count > 0) {
        CHECK(got.depth_pixels == count);
        CHECK(got.depth_mae == Catch::Approx(mae / count).margin(1e-12));
    }
}

TEST_CASE("checkpoint: save/load restores training state exactly") {
    TempDir dir("ckpt");
    SceneSpec spec;
    spec.n_primitives = 100;
    spec.image_size = 16;
    spec.focal = 20;
    const auto s = synth_scene(spec, 14);
    TrainConfig c;
    c.color_mode = ColorMode::Sh;
    c.sh_degree = 1;
    c.init_primitives = 60;
    c.total_iters = 12;
    c.soft_start_iter = 4;
    c.patch_min = 4;
    c.patch_max = 6;
    c.eval_interval = 0;
    c.densify_interval = 0;
    const auto r = fit(c, s.dataset);

    save_checkpoint(dir.str("ck.bin"), r.state, config_hash(c));
    const auto loaded = load_checkpoint(dir.str("ck.bin"));
    CHECK(loaded.config_hash == config_hash(c));
    CHECK(loaded.state.iter == r.state.iter);
    REQUIRE(loaded.state.field.size() == r.state.field.size());
    for (size_t i = 0; i < r.state.field.size(); ++i) {
        CHECK(loaded.state.field.primitives[i].center == r.state.field.primitives[i].center);
        CHECK(loaded.state.field.primitives[i].log_scale == r.state.field.primitives[i].log_scale);
        CHECK(loaded.state.field.primitives[i].rotation == r.state.field.primitives[i].rotation);
        CHECK(loaded.state.field.primitives[i].opacity_logit ==
              r.state.field.primitives[i].opacity_logit);
        CHECK(loaded.state.field.primitives[i].color_params ==
              r.state.field.primitives[i].color_params);
    }
    CHECK(loaded.state.adam.center.m == r.state.adam.center.m);
    CHECK(loaded.state.adam.opacity.v == r.state.adam.opacity.v);
    CHECK(loaded.state.rng == r.state.rng);

    // Continuing one step from the restored state matches the original.
    TrainState a = r.state, b = loaded.state;
    const auto sa = train_step(a, s.dataset.train[0], c);
    const auto sb = train_step(b, s.dataset.train[0], c);
    CHECK(sa.loss == sb.loss);
    CHECK(a.field.primitives[0].center == b.field.primitives[0].center);

    CHECK_THROWS_AS(load_checkpoint(dir.str("nope.bin")), ValidationError);
    {
        std::ofstream os(dir.str("junk.bin"), std::ios::binary);
        os << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_checkpoint(dir.str("junk.bin")), ValidationError);
}

TEST_CASE("checkpoint: neural state round trips") {
    TempDir dir("ckptn");
    SceneSpec spec;
    spec.n_primitives = 60;
    spec.image_size = 12;
    spec.focal = 16;
    const auto s = synth_scene(spec, 15);
    TrainConfig c;
    c.color_mode = ColorMode::Neural;
    c.neural.grid = HashGridConfig{4, 4, 32, 10, 2};
    c.neural.mlp_width = 16;
    c.neural.feature_dim = 16;
    c.init_primitives = 40;
    c.total_iters = 6;
    c.soft_start_iter = 2;
    c.patch_min = 4;
    c.patch_max = 6;
    c.eval_interval = 0;
    c.densify_interval = 0;
    const auto r = fit(c, s.dataset);
    save_checkpoint(dir.str("ck.bin"), r.state, config_hash(c));
    const auto loaded = load_checkpoint(dir.str("ck.bin"));
    CHECK(loaded.state.neural.encoder.table == r.state.neural.encoder.table);
    CHECK(loaded.state.neural.stage_a.weights == r.state.neural.stage_a.weights);
    CHECK(loaded.state.neural.stage_b.weights == r.state.neural.stage_b.weights);
    CHECK(loaded.state.adam.table == r.state.adam.table);

    // Renders from the restored state are identical.
    const auto cam = s.dataset.test[0].camera;
    const auto ca = compute_colors(r.state.field, r.state.neural_ptr(), cam);
    const auto cb = compute_colors(loaded.state.field, loaded.state.neural_ptr(), cam);
    for (size_t i = 0; i < ca.size(); ++i) CHECK(ca[i] == cb[i]);
}
