#include "dsplat/losses.hpp"

#include <catch_amalgamated.hpp>

#include <set>

using namespace dsplat;

namespace {

DepthMap map_from(int w, int h, const std::vector<double>& v) {
    DepthMap d(w, h);
    d.depth = v;
    return d;
}

DepthMap random_map(int w, int h, uint64_t seed, double lo = 1.0, double hi = 6.0) {
    DepthMap d(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : d.depth) v = u(rng);
    return d;
}

ImageBuffer random_image(int w, int h, uint64_t seed) {
    ImageBuffer img(w, h);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : img.rgb) v = u(rng);
    return img;
}

// Direct per-window SSIM, no separable filtering: the independent oracle.
double ssim_naive(const ImageBuffer& a, const ImageBuffer& b, int win = 11, double sigma = 1.5) {
    const double c1 = 1e-4, c2 = 9e-4;
    std::vector<double> k(win);
    double ksum = 0;
    for (int i = 0; i < win; ++i) {
        const double d = i - (win - 1) / 2.0;
        k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        ksum += k[i];
    }
    for (auto& v : k) v /= ksum;
    double total = 0;
    int count = 0;
    for (int ch = 0; ch < 3; ++ch) {
        for (int wy = 0; wy + win <= a.height; ++wy) {
            for (int wx = 0; wx + win <= a.width; ++wx) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int y = 0; y < win; ++y)
                    for (int x = 0; x < win; ++x) {
                        const double g = k[x] * k[y];
                        const double va = a.at(wx + x, wy + y)[ch];
                        const double vb = b.at(wx + x, wy + y)[ch];
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                         ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                count++;
            }
        }
    }
    return total / count;
}

}  // namespace

TEST_CASE("partition: exact tiling") {
    const auto grid = partition(16, 16, 8);
    REQUIRE(grid.patches.size() == 4);
    for (const auto& r : grid.patches) CHECK(r.pixels() == 64);
}

TEST_CASE("partition: ragged remainder tiling") {
    const auto grid = partition(17, 16, 8);
    REQUIRE(grid.patches.size() == 6);
    int full = 0, ragged = 0, total = 0;
    for (const auto& r : grid.patches) {
        total += r.pixels();
        if (r.pixels() == 64) full++;
        if (r.w == 1 && r.h == 8) ragged++;
    }
    CHECK(full == 4);
    CHECK(ragged == 2);
    CHECK(total == 272);
}

TEST_CASE("partition: patches are disjoint and cover the image") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int w = 3 + static_cast<int>(rng() % 40);
        const int h = 3 + static_cast<int>(rng() % 40);
        const int p = 2 + static_cast<int>(rng() % 12);
        const auto grid = partition(w, h, p);
        std::vector<int> hits(static_cast<size_t>(w) * h, 0);
        for (const auto& r : grid.patches) {
            CHECK(r.pixels() >= 1);
            for (int y = r.y0; y < r.y0 + r.h; ++y)
                for (int x = r.x0; x < r.x0 + r.w; ++x) hits[static_cast<size_t>(y) * w + x]++;
        }
        for (int v : hits) CHECK(v == 1);
    }
}

TEST_CASE("partition: patch size below 2 rejected") {
    CHECK_THROWS_AS(partition(8, 8, 1), ValidationError);
}

TEST_CASE("normalize_local: three-pixel patch against direct evaluation") {
    const auto d = map_from(3, 1, {1, 2, 3});
    const auto grid = partition(3, 1, 3);
    const double eps = 1e-9;
    const auto out = normalize_local(d, grid, eps);
    const double std_pop = std::sqrt(2.0 / 3.0);
    CHECK(out.values[0] == Catch::Approx(-1.0 / (std_pop + eps)).epsilon(1e-12));
    CHECK(out.values[0] == Catch::Approx(-1.2247448).epsilon(1e-4));
    CHECK(out.values[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(out.values[2] == Catch::Approx(1.0 / (std_pop + eps)).epsilon(1e-12));
}

TEST_CASE("normalize_local: constant patch maps to zero") {
    const auto d = map_from(2, 2, {5, 5, 5, 5});
    const auto out = normalize_local(d, partition(2, 2, 2), epsilon_for(d));
    for (double v : out.values) CHECK(v == 0.0);
}

TEST_CASE("normalize_global: two-patch example against direct evaluation") {
    // Patches {1,2} and {3,5}; image std is the population std of all four.
    const auto d = map_from(4, 1, {1, 2, 3, 5});
    const auto grid = partition(4, 1, 2);
    const auto out = normalize_global(d, grid);
    const double mean_all = 11.0 / 4.0;
    double ss = 0;
    for (double v : {1.0, 2.0, 3.0, 5.0}) ss += (v - mean_all) * (v - mean_all);
    const double std_all = std::sqrt(ss / 4.0);
    CHECK(std_all == Catch::Approx(1.479).margin(1e-3));
    const double denom = std_all + (0.01 * std_all + 1e-8);
    CHECK(out.values[0] == Catch::Approx((1 - 1.5) / denom).epsilon(1e-12));
    CHECK(out.values[1] == Catch::Approx((2 - 1.5) / denom).epsilon(1e-12));
    CHECK(out.values[2] == Catch::Approx((3 - 4.0) / denom).epsilon(1e-12));
    CHECK(out.values[3] == Catch::Approx((5 - 4.0) / denom).epsilon(1e-12));
}

TEST_CASE("normalize_global: constant image maps to zero") {
    const auto d = map_from(4, 2, std::vector<double>(8, 3.25));
    const auto out = normalize_global(d, partition(4, 2, 2));
    for (double v : out.values) CHECK(v == 0.0);
}

TEST_CASE("both normalizations are affine invariant") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> ua(0.1, 10.0), ub(-5.0, 5.0);
    for (int trial = 0; trial < 40; ++trial) {
        const auto d = random_map(20, 20, 100 + trial);
        const auto grid = partition(20, 20, 2 + static_cast<int>(rng() % 9));
        const double a = ua(rng), b = ub(rng);
        DepthMap scaled = d;
        for (auto& v : scaled.depth) v = a * v + b;

        const auto ln = normalize_local(d, grid, epsilon_for(d));
        const auto ln2 = normalize_local(scaled, grid, epsilon_for(scaled));
        const auto gn = normalize_global(d, grid);
        const auto gn2 = normalize_global(scaled, grid);
        for (size_t i = 0; i < ln.values.size(); ++i) {
            CHECK(std::abs(ln.values[i] - ln2.values[i]) < 1e-5);
            CHECK(std::abs(gn.values[i] - gn2.values[i]) < 1e-5);
        }
    }
}

TEST_CASE("local normalization: per-patch mean is zero") {
    for (int trial = 0; trial < 10; ++trial) {
        const auto d = random_map(24, 24, 500 + trial);
        const auto grid = partition(24, 24, 5);
        const auto out = normalize_local(d, grid, epsilon_for(d));
        for (const auto& r : grid.patches) {
            double mean = 0;
            for (int y = r.y0; y < r.y0 + r.h; ++y)
                for (int x = r.x0; x < r.x0 + r.w; ++x)
                    mean += out.values[static_cast<size_t>(y) * 24 + x];
            mean /= r.pixels();
            CHECK(std::abs(mean) < 1e-6);
        }
    }
}

TEST_CASE("normalization VJPs match finite differences") {
    const int w = 9, h = 6;
    auto d = random_map(w, h, 77);
    const auto grid = partition(w, h, 4);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uu(-1.0, 1.0);
    std::vector<double> upstream(d.pixel_count());
    for (auto& v : upstream) v = uu(rng);

    const auto g_local = normalize_local_vjp(d, grid, upstream);
    const auto g_global = normalize_global_vjp(d, grid, upstream);
    const double hstep = 1e-6;
    for (size_t i = 0; i < d.pixel_count(); ++i) {
        const double saved = d.depth[i];
        auto eval = [&](bool local) {
            const auto out = local ? normalize_local(d, grid, epsilon_for(d)) : normalize_global(d, grid);
            double s = 0;
            for (size_t j = 0; j < out.values.size(); ++j) s += upstream[j] * out.values[j];
            return s;
        };
        for (bool local : {true, false}) {
            d.depth[i] = saved + hstep;
            const double fp = eval(local);
            d.depth[i] = saved - hstep;
            const double fm = eval(local);
            d.depth[i] = saved;
            const double fd = (fp - fm) / (2 * hstep);
            const double an = local ? g_local[i] : g_global[i];
            CHECK(std::abs(fd - an) < 1e-6 * std::max({1.0, std::abs(fd), std::abs(an)}));
        }
    }
}

TEST_CASE("tolerant_l2 basics") {
    NormalizedDepth a{4, 1, {0.1, 0.2, 0.3, 0.4}, NormMode::Local};
    CHECK(tolerant_l2(a, a, 0.05) == 0.0);

    NormalizedDepth b = a;
    for (auto& v : b.values) v += 0.04;
    CHECK(tolerant_l2(a, b, 0.05) == 0.0);

    NormalizedDepth c = a;
    c.values[2] += 0.5;
    CHECK(tolerant_l2(a, c, 0.1) == Catch::Approx(0.16 / 4.0).epsilon(1e-12));

    NormalizedDepth wrong = a;
    wrong.mode = NormMode::Global;
    CHECK_THROWS_AS(tolerant_l2(a, wrong, 0.05), ValidationError);
}

TEST_CASE("depth_regularization: zero at equality, affine-insensitive, differentiable") {
    const auto d = random_map(16, 16, 31);
    const auto grid = partition(16, 16, 5);
    LossWeights w;
    CHECK(depth_regularization(d, d, grid, w) == 0.0);

    DepthMap affine = d;
    for (auto& v : affine.depth) v = 2.5 * v + 1.0;
    LossWeights w0 = w;
    w0.delta = 0.0;
    CHECK(depth_regularization(d, affine, grid, w0) < 1e-8);

    // Gradient vs finite differences, statistics included in the chain.
    auto rendered = random_map(8, 6, 32);
    const auto mono = random_map(8, 6, 33);
    const auto grid2 = partition(8, 6, 3);
    const auto grad = depth_regularization_vjp(rendered, mono, grid2, w);
    const double h = 1e-6;
    for (size_t i = 0; i < rendered.pixel_count(); ++i) {
        const double saved = rendered.depth[i];
        rendered.depth[i] = saved + h;
        const double fp = depth_regularization(rendered, mono, grid2, w);
        rendered.depth[i] = saved - h;
        const double fm = depth_regularization(rendered, mono, grid2, w);
        rendered.depth[i] = saved;
        const double fd = (fp - fm) / (2 * h);
        const double den = std::max(std::abs(fd), std::abs(grad[i]));
        if (den > 1e-10) CHECK(std::abs(fd - grad[i]) / den < 1e-4);
    }
}

TEST_CASE("ssim: self-similarity, symmetry, reference agreement") {
    const auto a = random_image(24, 18, 41);
    const auto b = random_image(24, 18, 42);
    CHECK(ssim(a, a) == Catch::Approx(1.0).margin(1e-12));
    CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);
    CHECK(ssim(a, b) == Catch::Approx(ssim_naive(a, b)).margin(1e-10));

    // Binary checkerboard against its inverse: strongly dissimilar.
    ImageBuffer cb(16, 16), inv(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) {
                cb.at(x, y)[c] = (x + y) % 2 ? 1.0 : 0.0;
                inv.at(x, y)[c] = (x + y) % 2 ? 0.0 : 1.0;
            }
    CHECK(ssim(cb, inv) < 0.0);

    // Constants have a closed form: (2ab + C1) / (a^2 + b^2 + C1).
    ImageBuffer ca(16, 16), cbuf(16, 16);
    for (auto& v : ca.rgb) v = 0.2;
    for (auto& v : cbuf.rgb) v = 0.7;
    const double expected = (2 * 0.2 * 0.7 + 1e-4) / (0.2 * 0.2 + 0.7 * 0.7 + 1e-4);
    CHECK(ssim(ca, cbuf) == Catch::Approx(expected).margin(1e-6));
    CHECK(ssim_naive(ca, cbuf) == Catch::Approx(expected).margin(1e-6));
}

TEST_CASE("ssim gradient matches finite differences") {
    auto a = random_image(14, 13, 51);
    const auto b = random_image(14, 13, 52);
    const auto grad = ssim_vjp(a, b, 1.0);
    const double h = 1e-6;
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 60; ++trial) {
        const size_t i = rng() % a.rgb.size();
        const double saved = a.rgb[i];
        a.rgb[i] = saved + h;
        const double fp = ssim(a, b);
        a.rgb[i] = saved - h;
        const double fm = ssim(a, b);
        a.rgb[i] = saved;
        const double fd = (fp - fm) / (2 * h);
        CHECK(std::abs(fd - grad[i]) < 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("color_loss basics and gradient") {
    const auto a = random_image(16, 16, 61);
    CHECK(color_loss(a, a, 0.2) == 0.0);

    ImageBuffer zero(16, 16), one(16, 16);
    for (auto& v : one.rgb) v = 1.0;
    CHECK(color_loss(zero, one, 0.0) == Catch::Approx(1.0).margin(1e-12));

    auto x = random_image(16, 16, 62);
    const auto gt = random_image(16, 16, 63);
    const double l1_only = color_loss(x, gt, 0.0);
    double mae = 0;
    for (size_t i = 0; i < x.rgb.size(); ++i) mae += std::abs(x.rgb[i] - gt.rgb[i]);
    CHECK(l1_only == Catch::Approx(mae / x.rgb.size()).epsilon(1e-12));

    const auto grad = color_loss_vjp(x, gt, 0.2);
    const double h = 1e-6;
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 40; ++trial) {
        const size_t i = rng() % x.rgb.size();
        const double saved = x.rgb[i];
        x.rgb[i] = saved + h;
        const double fp = color_loss(x, gt, 0.2);
        x.rgb[i] = saved - h;
        const double fm = color_loss(x, gt, 0.2);
        x.rgb[i] = saved;
        CHECK(std::abs((fp - fm) / (2 * h) - grad[i]) < 1e-6);
    }
}

TEST_CASE("total_loss is the unit-weight sum") {
    CHECK(total_loss(0, 0, 0) == 0.0);
    CHECK(total_loss(0.3, 0.1, 0.05) == Catch::Approx(0.45).margin(1e-15));
    CHECK(total_loss(0.3, 0.1, 0.0) == Catch::Approx(0.4).margin(1e-15));
}
