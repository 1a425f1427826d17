#include "dsplat/io.hpp"

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("dsplat_cli_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& rel = "") const { return (path / rel).string(); }
};

int run(const std::string& args) {
    const std::string cmd = std::string(DSPLAT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("cli: synth / train / eval / render / gradcheck pipeline") {
    TempDir dir;
    {
        std::ofstream os(dir.str("scene.txt"));
        os << "kind = textured-planes\n"
           << "n_primitives = 150\n"
           << "image_size = 20\n"
           << "focal = 26\n"
           << "test_views = 2\n";
    }
    REQUIRE(run("synth --spec " + dir.str("scene.txt") + " --seed 3 --out " + dir.str("data")) == 0);
    CHECK(fs::exists(dir.str("data/dataset.json")));
    CHECK(fs::exists(dir.str("data/gt_field.ply")));

    {
        std::ofstream os(dir.str("train.cfg"));
        os << "total_iters = 25\n"
           << "soft_start_iter = 5\n"
           << "init_primitives = 80\n"
           << "color_mode = sh\n"
           << "sh_degree = 1\n"
           << "patch_min = 4\npatch_max = 6\n"
           << "eval_interval = 25\n"
           << "densify_interval = 0\n";
    }
    REQUIRE(run("train --data " + dir.str("data") + " --config " + dir.str("train.cfg") +
                " --out " + dir.str("run")) == 0);
    CHECK(fs::exists(dir.str("run/checkpoint.bin")));
    CHECK(fs::exists(dir.str("run/metrics.json")));

    REQUIRE(run("eval --ckpt " + dir.str("run/checkpoint.bin") + " --data " + dir.str("data") +
                " --report " + dir.str("report.json")) == 0);
    CHECK(fs::exists(dir.str("report.json")));
    {
        std::ifstream is(dir.str("report.json"));
        nlohmann::json report;
        is >> report;
        CHECK(report.contains("mean"));
        CHECK(report.at("views").size() == 2);
    }

    // Render from one of the dataset cameras.
    {
        std::ifstream is(dir.str("data/dataset.json"));
        nlohmann::json manifest;
        is >> manifest;
        std::ofstream os(dir.str("cam.json"));
        os << manifest.at("test").at(0).at("camera").dump();
    }
    REQUIRE(run("render --ckpt " + dir.str("run/checkpoint.bin") + " --camera " + dir.str("cam.json") +
                " --out " + dir.str("render.png") + " --depth " + dir.str("render.pfm")) == 0);
    const auto img = dsplat::read_png(dir.str("render.png"));
    CHECK(img.width == 20);
    const auto depth = dsplat::read_depth_pfm(dir.str("render.pfm"));
    CHECK(depth.width == 20);

    CHECK(run("gradcheck --seed 2 --size 10 --prims 5") == 0);
}

TEST_CASE("cli: train ablation flags and --print-config") {
    TempDir dir;
    REQUIRE(run("synth --out " + dir.str("data") + " --seed 1") == 0);
    const std::string base = "train --data " + dir.str("data") + " --iters 4 --color-mode sh:1 ";
    CHECK(run(base + "--out " + dir.str("r1") + " --no-hard --no-soft") == 0);
    CHECK(run(base + "--out " + dir.str("r2") + " --no-local-norm --no-shape-freeze --no-center-freeze") == 0);

    const std::string cmd = std::string(DSPLAT_CLI_PATH) + " train --print-config > " +
                            dir.str("cfg.txt") + " 2>/dev/null";
    REQUIRE(std::system(cmd.c_str()) == 0);
    const auto cfg = dsplat::parse_config([&] {
        std::ifstream is(dir.str("cfg.txt"));
        std::ostringstream os;
        os << is.rdbuf();
        return os.str();
    }());
    CHECK(cfg.total_iters == 6000);
    CHECK(cfg.tau == 0.95);
}

TEST_CASE("cli: validation failures exit with code 2") {
    TempDir dir;
    CHECK(run("train --data /nonexistent --out " + dir.str("x")) == 2);
    CHECK(run("eval --ckpt /nonexistent.bin --data /nonexistent --report " + dir.str("r.json")) == 2);
    CHECK(run("render --ckpt /nonexistent.bin --camera /nope.json --out " + dir.str("o.png")) == 2);
    CHECK(run("synth --spec /nonexistent.txt --out " + dir.str("d")) == 2);
    CHECK(run("bogus-subcommand") == 2);
    {
        std::ofstream os(dir.str("bad.cfg"));
        os << "definitely_not_a_key = 1\n";
    }
    CHECK(run("train --config " + dir.str("bad.cfg") + " --print-config") == 2);
}
