#include "dsplat/color.hpp"
#include "dsplat/gradcheck.hpp"

#include <catch_amalgamated.hpp>

using namespace dsplat;

namespace {

// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n.
void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
    nodes.resize(n);
    weights.resize(n);
    for (int i = 0; i < n; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        for (int it = 0; it < 100; ++it) {
            double p0 = 1, p1 = x;
            for (int k = 2; k <= n; ++k) {
                const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            const double dp = n * (x * p1 - p0) / (x * x - 1);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        double p0 = 1, p1 = x;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        const double dp = n * (x * p1 - p0) / (x * x - 1);
        nodes[i] = x;
        weights[i] = 2.0 / ((1 - x * x) * dp * dp);
    }
}

Vec3 random_dir(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0, 1);
    Vec3 v(g(rng), g(rng), g(rng));
    return v.normalized();
}

}  // namespace

TEST_CASE("sh basis: orthonormal over the sphere up to degree 4") {
    // Quadrature oracle: Gauss-Legendre in cos(theta) times uniform phi is
    // exact for the polynomial integrands involved.
    std::vector<double> nodes, weights;
    gauss_legendre(16, nodes, weights);
    const int nphi = 32;
    const int nb = sh_basis_size(4);
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(nb, nb);
    double vals[25];
    for (int i = 0; i < 16; ++i) {
        const double z = nodes[i];
        const double r = std::sqrt(1 - z * z);
        for (int j = 0; j < nphi; ++j) {
            const double phi = 2 * M_PI * j / nphi;
            sh_basis(4, Vec3(r * std::cos(phi), r * std::sin(phi), z), vals);
            const double w = weights[i] * (2 * M_PI / nphi);
            for (int a = 0; a < nb; ++a)
                for (int b = 0; b <= a; ++b) gram(a, b) += w * vals[a] * vals[b];
        }
    }
    for (int a = 0; a < nb; ++a)
        for (int b = 0; b <= a; ++b)
            CHECK(std::abs(gram(a, b) - (a == b ? 1.0 : 0.0)) < 1e-10);
}

TEST_CASE("sh basis gradients match finite differences of the polynomials") {
    std::mt19937_64 rng(3);
    double base[25], hi[25], lo[25];
    Vec3 grads[25];
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 dir = random_dir(rng);
        sh_basis(4, dir, base);
        sh_basis_grad(4, dir, grads);
        const double h = 1e-6;
        for (int a = 0; a < 3; ++a) {
            Vec3 dp = dir, dm = dir;
            dp[a] += h;
            dm[a] -= h;
            sh_basis(4, dp, hi);
            sh_basis(4, dm, lo);
            for (int k = 0; k < 25; ++k)
                CHECK(std::abs((hi[k] - lo[k]) / (2 * h) - grads[k][a]) < 1e-7);
        }
    }
}

TEST_CASE("sh_eval: constant band behaves as documented") {
    Eigen::VectorXd coeffs = Eigen::VectorXd::Zero(3);
    coeffs[0] = 0.8;  // red DC
    const Vec3 up = sh_eval(coeffs, 0, Vec3(0, 0, 1));
    CHECK(up.x() == Catch::Approx(0.8 * 0.28209479177387814 + 0.5).epsilon(1e-12));
    CHECK(up.y() == Catch::Approx(0.5).margin(1e-15));
    // Direction independence at degree 0.
    std::mt19937_64 rng(11);
    for (int t = 0; t < 10; ++t) CHECK(sh_eval(coeffs, 0, random_dir(rng)) == up);
    // Clamp to [0, 1].
    coeffs[0] = 10.0;
    CHECK(sh_eval(coeffs, 0, Vec3(0, 0, 1)).x() == 1.0);
    coeffs[0] = -10.0;
    CHECK(sh_eval(coeffs, 0, Vec3(0, 0, 1)).x() == 0.0);
}

TEST_CASE("sh_eval: degree-1 z coefficient is antisymmetric about mid-gray") {
    Eigen::VectorXd coeffs = Eigen::VectorXd::Zero(12);
    coeffs[2 * 3 + 1] = 0.4;  // z-linear basis, green channel
    const Vec3 plus = sh_eval(coeffs, 1, Vec3(0, 0, 1));
    const Vec3 minus = sh_eval(coeffs, 1, Vec3(0, 0, -1));
    CHECK(plus.y() - 0.5 == Catch::Approx(0.5 - minus.y()).margin(1e-12));
    CHECK(plus.y() > 0.5);
}

TEST_CASE("hash grid: corner positions reproduce stored features exactly") {
    HashGridEncoder enc;
    enc.cfg = HashGridConfig{4, 4, 32, 10, 2};
    enc.bb_min = Vec3(-1, -1, -1);
    enc.bb_max = Vec3(1, 1, 1);
    enc.init(7);
    std::vector<double> out(enc.cfg.output_dim());
    enc.encode(Vec3(-1, -1, -1), out.data());  // unit coordinate (0,0,0): a corner at every level
    for (int l = 0; l < enc.cfg.levels; ++l) {
        const uint32_t hcorner = enc.hash(l, 0, 0, 0);
        for (int f = 0; f < 2; ++f)
            CHECK(out[l * 2 + f] == enc.table[enc.entry_index(l, hcorner, f)]);
    }
}

TEST_CASE("hash grid: zeroed tables encode to zero") {
    HashGridEncoder enc;
    enc.cfg = HashGridConfig{4, 4, 32, 8, 2};
    enc.init(1);
    std::fill(enc.table.begin(), enc.table.end(), 0.0);
    std::vector<double> out(enc.cfg.output_dim(), 1.0);
    enc.encode(Vec3(0.37, -0.21, 0.64), out.data());
    for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("hash grid: resolutions grow geometrically and strictly") {
    HashGridEncoder enc;
    enc.cfg = HashGridConfig{};  // 16 levels, 16..512
    enc.cfg.log2_table_size = 10;  // keep the test allocation small
    enc.init(3);
    REQUIRE(enc.resolutions.size() == 16);
    CHECK(enc.resolutions.front() == 16);
    CHECK(enc.resolutions.back() == 512);
    for (size_t i = 1; i < enc.resolutions.size(); ++i)
        CHECK(enc.resolutions[i] > enc.resolutions[i - 1]);
}

TEST_CASE("hash grid: gradients match finite differences") {
    HashGridEncoder enc;
    enc.cfg = HashGridConfig{6, 4, 64, 10, 2};
    enc.bb_min = Vec3(-2, -2, -2);
    enc.bb_max = Vec3(2, 2, 2);
    enc.init(5);
    const Vec3 pos(0.3123, -0.7477, 1.1191);
    std::vector<double> upstream(enc.cfg.output_dim());
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& v : upstream) v = u(rng);

    std::map<int64_t, double> tg;
    Vec3 pos_cot = Vec3::Zero();
    enc.encode_vjp(pos, upstream.data(), tg, pos_cot);

    std::vector<double> out(enc.cfg.output_dim());
    auto eval = [&](const Vec3& p) {
        enc.encode(p, out.data());
        double s = 0;
        for (size_t i = 0; i < out.size(); ++i) s += upstream[i] * out[i];
        return s;
    };
    const double h = 1e-6;
    for (const auto& [idx, g] : tg) {
        const double saved = enc.table[static_cast<size_t>(idx)];
        enc.table[static_cast<size_t>(idx)] = saved + h;
        const double fp = eval(pos);
        enc.table[static_cast<size_t>(idx)] = saved - h;
        const double fm = eval(pos);
        enc.table[static_cast<size_t>(idx)] = saved;
        CHECK(std::abs((fp - fm) / (2 * h) - g) < 1e-7);
    }
    for (int a = 0; a < 3; ++a) {
        Vec3 pp = pos, pm = pos;
        pp[a] += h;
        pm[a] -= h;
        const double fd = (eval(pp) - eval(pm)) / (2 * h);
        CHECK(std::abs(fd - pos_cot[a]) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

namespace {

NeuralColorState small_neural_state(const Aabb& box, uint64_t seed, bool warm_tables = false) {
    NeuralColorState st;
    st.cfg.grid = HashGridConfig{4, 4, 32, 10, 2};
    st.cfg.mlp_width = 16;
    st.cfg.feature_dim = 16;
    st.init(seed, box);
    if (warm_tables) {
        // O(1) table values keep stage-A pre-activations away from the ReLU
        // kinks that finite differences would otherwise straddle.
        std::mt19937_64 rng(seed * 3 + 1);
        std::uniform_real_distribution<double> u(-0.6, 0.6);
        for (auto& t : st.encoder.table) t = u(rng);
    }
    return st;
}

}  // namespace

TEST_CASE("neural color: caching is semantically invisible and version-guarded") {
    const auto field = gradcheck_scene(6, 13, 0);
    Aabb box{Vec3(-2, -2, 1), Vec3(2, 2, 5)};
    auto st = small_neural_state(box, 21);
    const auto cam_a = gradcheck_camera(12);
    Camera cam_b = cam_a;
    cam_b.translation += Vec3(0.2, -0.1, 0.05);

    const auto with_cache_a = neural_color(field, st, cam_a, true);
    const auto cached_features = st.cache.features;  // filled on first use
    const auto with_cache_b = neural_color(field, st, cam_b, true);
    CHECK(st.cache.features == cached_features);  // reused bit-exactly across views

    const auto no_cache_a = neural_color(field, st, cam_a, false);
    const auto no_cache_b = neural_color(field, st, cam_b, false);
    for (size_t i = 0; i < field.size(); ++i) {
        CHECK(with_cache_a[i] == no_cache_a[i]);
        CHECK(with_cache_b[i] == no_cache_b[i]);
    }

    // A parameter update bumps the version; recomputation changes outputs.
    const auto before = neural_color(field, st, cam_a, true);
    st.stage_b.weights.back() += 0.5;  // output bias: never gated by a ReLU
    st.invalidate();
    const auto after = neural_color(field, st, cam_a, true);
    CHECK(st.cache.version == st.version);
    bool changed = false;
    for (size_t i = 0; i < field.size(); ++i) changed = changed || before[i] != after[i];
    CHECK(changed);
}

TEST_CASE("neural color outputs stay inside the unit range") {
    const auto field = gradcheck_scene(20, 14, 0);
    auto st = small_neural_state(Aabb{Vec3(-2, -2, 1), Vec3(2, 2, 5)}, 22);
    for (auto& c : neural_color(field, st, gradcheck_camera(8)))
        for (int a = 0; a < 3; ++a) {
            CHECK(c[a] > 0.0);
            CHECK(c[a] < 1.0);
        }
    // Saturated logits may round to the endpoints in floating point but
    // never escape [0, 1].
    for (auto& w : st.stage_b.weights) w *= 20.0;
    st.invalidate();
    for (auto& c : neural_color(field, st, gradcheck_camera(8)))
        for (int a = 0; a < 3; ++a) {
            CHECK(c[a] >= 0.0);
            CHECK(c[a] <= 1.0);
        }
}

TEST_CASE("full neural path gradient matches finite differences") {
    auto field = gradcheck_scene(5, 15, 0);
    field.color_mode = ColorMode::Neural;
    for (auto& p : field.primitives) p.color_params.resize(0);
    auto st = small_neural_state(Aabb{Vec3(-2, -2, 1), Vec3(2, 2, 5)}, 23, /*warm_tables=*/true);
    const auto cam = gradcheck_camera(12);
    const WeightedSumLoss loss(12 * 12 * 3, 77);
    const auto rep = finite_diff_check(field, &st, cam, RenderKind::color(), loss, 1e-5);
    INFO("worst rel " << rep.worst_rel());
    CHECK(rep.pass(1e-4, 1e-7));
}
