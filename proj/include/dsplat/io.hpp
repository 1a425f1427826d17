#pragma once

#include "dsplat/data.hpp"
#include "dsplat/trainer.hpp"

#include <json.hpp>
#include <png.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace dsplat {

// --------------------------------------------------------------------------
// PNG (8-bit sRGB, values mapped linearly to [0, 1]).
// --------------------------------------------------------------------------

inline void write_png(const std::string& path, const ImageBuffer& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw ValidationError("write_png: cannot open '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw ValidationError("write_png: libpng failure for '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(img.at(x, y)[c], 0.0, 1.0);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline ImageBuffer read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw ValidationError("read_png: missing file '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw ValidationError("read_png: libpng failure for '" + path + "'");
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    ImageBuffer img(width, height);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(x, y)[c] = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// --------------------------------------------------------------------------
// PFM (grayscale, 32-bit float). The scale field's sign encodes endianness;
// this implementation writes and accepts little-endian only. Rows are stored
// bottom-up per the format convention.
// --------------------------------------------------------------------------

inline void write_pfm(const std::string& path, int width, int height,
                      const std::vector<double>& values) {
    if (values.size() != static_cast<size_t>(width) * height)
        throw ValidationError("write_pfm: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("write_pfm: cannot open '" + path + "'");
    os << "Pf\n" << width << " " << height << "\n-1.0\n";
    std::vector<float> row(width);
    for (int y = height - 1; y >= 0; --y) {
        for (int x = 0; x < width; ++x)
            row[x] = static_cast<float>(values[static_cast<size_t>(y) * width + x]);
        os.write(reinterpret_cast<const char*>(row.data()), sizeof(float) * width);
    }
    if (!os) throw ValidationError("write_pfm: write failure for '" + path + "'");
}

struct PfmImage {
    int width = 0, height = 0;
    std::vector<double> values;
};

inline PfmImage read_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("read_pfm: missing file '" + path + "'");
    std::string magic;
    is >> magic;
    if (magic == "PF") throw ValidationError("read_pfm: color PFM not supported: '" + path + "'");
    if (magic != "Pf") throw ValidationError("read_pfm: not a PFM file: '" + path + "'");
    int width = 0, height = 0;
    double scale = 0;
    is >> width >> height >> scale;
    if (!is || width <= 0 || height <= 0)
        throw ValidationError("read_pfm: malformed header in '" + path + "'");
    if (scale > 0)
        throw ValidationError("read_pfm: big-endian PFM rejected (scale " + std::to_string(scale) +
                              ") in '" + path + "'");
    is.get();  // single whitespace byte before the raster
    PfmImage out;
    out.width = width;
    out.height = height;
    out.values.resize(static_cast<size_t>(width) * height);
    std::vector<float> row(width);
    for (int y = height - 1; y >= 0; --y) {
        is.read(reinterpret_cast<char*>(row.data()), sizeof(float) * width);
        if (!is) throw ValidationError("read_pfm: truncated raster in '" + path + "'");
        for (int x = 0; x < width; ++x) out.values[static_cast<size_t>(y) * width + x] = row[x];
    }
    return out;
}

inline void write_depth_pfm(const std::string& path, const DepthMap& d) {
    write_pfm(path, d.width, d.height, d.depth);
}

inline DepthMap read_depth_pfm(const std::string& path) {
    const auto p = read_pfm(path);
    DepthMap d(p.width, p.height);
    d.depth = p.values;
    for (double v : d.depth)
        if (!(v >= 0) || !std::isfinite(v))
            throw ValidationError("read_depth_pfm: negative or non-finite depth in '" + path + "'");
    return d;
}

// --------------------------------------------------------------------------
// PLY export of the Gaussian point cloud (binary little-endian). Colors are
// evaluated at a canonical view direction (+z).
// --------------------------------------------------------------------------

inline void write_ply(const std::string& path, const GaussianField& field,
                      const NeuralColorState* neural = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("write_ply: cannot open '" + path + "'");
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << field.size() << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    os << "property float opacity\n";
    os << "property float scale_0\nproperty float scale_1\nproperty float scale_2\n";
    os << "property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n";
    os << "end_header\n";

    const Vec3 canonical(0, 0, 1);
    for (size_t i = 0; i < field.size(); ++i) {
        const auto& prim = field.primitives[i];
        Vec3 rgb(0.5, 0.5, 0.5);
        if (field.color_mode == ColorMode::Sh) {
            rgb = sh_eval(prim.color_params, field.sh_degree, canonical);
        } else if (neural) {
            const auto feat = detail::stage_a_feature(*neural, prim.center);
            std::vector<double> bin(neural->cfg.feature_dim + neural->cfg.dir_encoding_dim());
            double denc[25];
            sh_basis(neural->cfg.dir_sh_degree, canonical, denc);
            std::copy(feat.begin(), feat.end(), bin.begin());
            std::copy(denc, denc + neural->cfg.dir_encoding_dim(), bin.begin() + neural->cfg.feature_dim);
            std::vector<std::vector<double>> acts;
            neural->stage_b.forward(bin, acts);
            rgb = Vec3(acts.back()[0], acts.back()[1], acts.back()[2]);
        }
        float f[11];
        f[0] = static_cast<float>(prim.center.x());
        f[1] = static_cast<float>(prim.center.y());
        f[2] = static_cast<float>(prim.center.z());
        os.write(reinterpret_cast<const char*>(f), 3 * sizeof(float));
        unsigned char c[3];
        for (int a = 0; a < 3; ++a)
            c[a] = static_cast<unsigned char>(std::lround(std::clamp(rgb[a], 0.0, 1.0) * 255.0));
        os.write(reinterpret_cast<const char*>(c), 3);
        const Vec3 s = prim.scale();
        const Vec4 q = prim.rotation.normalized();
        f[0] = static_cast<float>(prim.opacity());
        f[1] = static_cast<float>(s.x());
        f[2] = static_cast<float>(s.y());
        f[3] = static_cast<float>(s.z());
        f[4] = static_cast<float>(q[0]);
        f[5] = static_cast<float>(q[1]);
        f[6] = static_cast<float>(q[2]);
        f[7] = static_cast<float>(q[3]);
        os.write(reinterpret_cast<const char*>(f), 8 * sizeof(float));
    }
    if (!os) throw ValidationError("write_ply: write failure for '" + path + "'");
}

inline GaussianField read_ply(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("read_ply: missing file '" + path + "'");
    std::string line;
    size_t n = 0;
    bool header_done = false;
    std::vector<std::string> props;
    if (!std::getline(is, line) || line != "ply")
        throw ValidationError("read_ply: not a PLY file: '" + path + "'");
    while (std::getline(is, line)) {
        if (line == "end_header") {
            header_done = true;
            break;
        }
        std::istringstream ls(line);
        std::string tok;
        ls >> tok;
        if (tok == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt != "binary_little_endian")
                throw ValidationError("read_ply: unsupported format '" + fmt + "'");
        } else if (tok == "element") {
            std::string what;
            ls >> what >> n;
            if (what != "vertex") throw ValidationError("read_ply: unexpected element '" + what + "'");
        } else if (tok == "property") {
            std::string type, name;
            ls >> type >> name;
            props.push_back(name);
        }
    }
    if (!header_done) throw ValidationError("read_ply: truncated header in '" + path + "'");
    const std::vector<std::string> expected = {"x", "y", "z", "red", "green", "blue", "opacity",
                                               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
                                               "rot_2", "rot_3"};
    if (props != expected) throw ValidationError("read_ply: unexpected property layout in '" + path + "'");

    GaussianField field;
    field.color_mode = ColorMode::Sh;
    field.sh_degree = 0;
    field.primitives.resize(n);
    for (size_t i = 0; i < n; ++i) {
        float f3[3];
        unsigned char c[3];
        float f8[8];
        is.read(reinterpret_cast<char*>(f3), sizeof(f3));
        is.read(reinterpret_cast<char*>(c), sizeof(c));
        is.read(reinterpret_cast<char*>(f8), sizeof(f8));
        if (!is) throw ValidationError("read_ply: truncated vertex data in '" + path + "'");
        auto& prim = field.primitives[i];
        prim.center = Vec3(f3[0], f3[1], f3[2]);
        const double alpha = std::clamp(static_cast<double>(f8[0]), 1e-7, 1.0 - 1e-7);
        prim.opacity_logit = logit(alpha);
        prim.log_scale = Vec3(std::log(f8[1]), std::log(f8[2]), std::log(f8[3]));
        prim.rotation = Vec4(f8[4], f8[5], f8[6], f8[7]);
        prim.color_params = Eigen::VectorXd::Zero(3);
        for (int a = 0; a < 3; ++a)
            prim.color_params[a] = (c[a] / 255.0 - 0.5) / detail::kSh0;
    }
    return field;
}

// --------------------------------------------------------------------------
// Cameras and datasets (JSON manifest + PNG/PFM planes).
// --------------------------------------------------------------------------

inline nlohmann::json camera_to_json(const Camera& cam) {
    nlohmann::json j;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["z_near"] = cam.z_near;
    std::vector<double> m(16, 0.0);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) m[static_cast<size_t>(r) * 4 + c] = cam.rotation(r, c);
        m[static_cast<size_t>(r) * 4 + 3] = cam.translation[r];
    }
    m[15] = 1.0;
    j["world_to_camera"] = m;
    return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
    Camera cam;
    try {
        cam.fx = j.at("fx").get<double>();
        cam.fy = j.at("fy").get<double>();
        cam.cx = j.at("cx").get<double>();
        cam.cy = j.at("cy").get<double>();
        cam.width = j.at("width").get<int>();
        cam.height = j.at("height").get<int>();
        if (j.contains("z_near")) cam.z_near = j.at("z_near").get<double>();
        const auto m = j.at("world_to_camera").get<std::vector<double>>();
        if (m.size() != 16) throw ValidationError("camera: world_to_camera must hold 16 values");
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) cam.rotation(r, c) = m[static_cast<size_t>(r) * 4 + c];
            cam.translation[r] = m[static_cast<size_t>(r) * 4 + 3];
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("camera: malformed JSON (") + e.what() + ")");
    }
    if (!(cam.fx > 0) || !(cam.fy > 0)) throw ValidationError("camera: focal lengths must be positive");
    if (!(cam.z_near > 0)) throw ValidationError("camera: z_near must be positive");
    const Mat3 rtr = cam.rotation * cam.rotation.transpose();
    if ((rtr - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 || cam.rotation.determinant() < 0)
        throw ValidationError("camera: rotation is not a proper orthonormal matrix");
    return cam;
}

inline Camera load_camera(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("load_camera: missing file '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("load_camera: malformed JSON in '" + path + "': " + e.what());
    }
    return camera_from_json(j);
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "depth");
    nlohmann::json j;
    j["bbox"] = {{"min", {ds.bbox.min.x(), ds.bbox.min.y(), ds.bbox.min.z()}},
                 {"max", {ds.bbox.max.x(), ds.bbox.max.y(), ds.bbox.max.z()}}};
    auto dump_split = [&](const std::vector<View>& views, const char* split) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& v : views) {
            nlohmann::json e;
            e["name"] = v.name;
            e["camera"] = camera_to_json(v.camera);
            const std::string img_rel = "images/" + v.name + ".png";
            write_png((fs::path(dir) / img_rel).string(), v.image);
            e["image"] = img_rel;
            if (v.depth_mono) {
                const std::string rel = "depth/" + v.name + "_mono.pfm";
                write_depth_pfm((fs::path(dir) / rel).string(), *v.depth_mono);
                e["depth_mono"] = rel;
            }
            if (v.depth_gt) {
                const std::string rel = "depth/" + v.name + "_gt.pfm";
                write_depth_pfm((fs::path(dir) / rel).string(), *v.depth_gt);
                e["depth_gt"] = rel;
            }
            arr.push_back(e);
        }
        j[split] = arr;
    };
    dump_split(ds.train, "train");
    dump_split(ds.test, "test");
    std::ofstream os(fs::path(dir) / "dataset.json");
    if (!os) throw ValidationError("save_dataset: cannot write manifest in '" + dir + "'");
    os << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest = fs::path(dir) / "dataset.json";
    std::ifstream is(manifest);
    if (!is) throw ValidationError("load_dataset: missing manifest '" + manifest.string() + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("load_dataset: malformed JSON in '" + manifest.string() + "': " + e.what());
    }
    Dataset ds;
    try {
        const auto& bb = j.at("bbox");
        for (int a = 0; a < 3; ++a) {
            ds.bbox.min[a] = bb.at("min").at(a).get<double>();
            ds.bbox.max[a] = bb.at("max").at(a).get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("load_dataset: malformed bbox (") + e.what() + ")");
    }
    auto load_split = [&](const char* split, std::vector<View>& out) {
        if (!j.contains(split)) return;
        for (const auto& e : j.at(split)) {
            View v;
            try {
                v.name = e.at("name").get<std::string>();
                v.camera = camera_from_json(e.at("camera"));
                v.image = read_png((fs::path(dir) / e.at("image").get<std::string>()).string());
                if (e.contains("depth_mono"))
                    v.depth_mono =
                        read_depth_pfm((fs::path(dir) / e.at("depth_mono").get<std::string>()).string());
                if (e.contains("depth_gt"))
                    v.depth_gt =
                        read_depth_pfm((fs::path(dir) / e.at("depth_gt").get<std::string>()).string());
            } catch (const nlohmann::json::exception& ex) {
                throw ValidationError(std::string("load_dataset: malformed view entry (") + ex.what() + ")");
            }
            if (v.image.width != v.camera.width || v.image.height != v.camera.height)
                throw ValidationError("load_dataset: image/camera dimension mismatch for view '" +
                                      v.name + "'");
            if (v.depth_mono && (v.depth_mono->width != v.camera.width ||
                                 v.depth_mono->height != v.camera.height))
                throw ValidationError("load_dataset: mono depth dimension mismatch for view '" +
                                      v.name + "'");
            if (v.depth_gt &&
                (v.depth_gt->width != v.camera.width || v.depth_gt->height != v.camera.height))
                throw ValidationError("load_dataset: gt depth dimension mismatch for view '" +
                                      v.name + "'");
            out.push_back(std::move(v));
        }
    };
    load_split("train", ds.train);
    load_split("test", ds.test);
    return ds;
}

// --------------------------------------------------------------------------
// Checkpoints: versioned binary snapshot of field + optimizer + config hash
// + iteration (+ RNG stream, so runs resume deterministically).
// --------------------------------------------------------------------------

namespace detail {

constexpr char kCkptMagic[8] = {'D', 'S', 'P', 'L', 'A', 'T', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
inline void put_vec(std::ostream& os, const std::vector<double>& v) {
    put<uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
inline std::vector<double> get_vec(std::istream& is) {
    const auto n = get<uint64_t>(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
    return v;
}
inline void put_buf(std::ostream& os, const AdamBuf& b) {
    put_vec(os, b.m);
    put_vec(os, b.v);
}
inline AdamBuf get_buf(std::istream& is) {
    AdamBuf b;
    b.m = get_vec(is);
    b.v = get_vec(is);
    return b;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TrainState& st, uint64_t cfg_hash) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("save_checkpoint: cannot open '" + path + "'");
    using namespace detail;
    os.write(kCkptMagic, 8);
    put<uint32_t>(os, kCkptVersion);
    put<uint64_t>(os, cfg_hash);
    put<int64_t>(os, st.iter);
    put<uint8_t>(os, st.field.color_mode == ColorMode::Neural ? 1 : 0);
    put<int32_t>(os, st.field.sh_degree);
    put<uint64_t>(os, st.field.size());
    put<int32_t>(os, st.field.feature_dim());
    for (const auto& p : st.field.primitives) {
        put(os, p.center);
        put(os, p.log_scale);
        put(os, p.rotation);
        put<double>(os, p.opacity_logit);
        os.write(reinterpret_cast<const char*>(p.color_params.data()),
                 static_cast<std::streamsize>(p.color_params.size() * 8));
    }
    put<int64_t>(os, st.adam.step_count);
    put_buf(os, st.adam.center);
    put_buf(os, st.adam.log_scale);
    put_buf(os, st.adam.rotation);
    put_buf(os, st.adam.opacity);
    put_buf(os, st.adam.color);
    if (st.field.color_mode == ColorMode::Neural) {
        const auto& n = st.neural;
        put<int32_t>(os, n.cfg.grid.levels);
        put<int32_t>(os, n.cfg.grid.base_resolution);
        put<int32_t>(os, n.cfg.grid.max_resolution);
        put<int32_t>(os, n.cfg.grid.log2_table_size);
        put<int32_t>(os, n.cfg.grid.features_per_entry);
        put<int32_t>(os, n.cfg.mlp_width);
        put<int32_t>(os, n.cfg.feature_dim);
        put<int32_t>(os, n.cfg.stage_a_layers);
        put<int32_t>(os, n.cfg.stage_b_layers);
        put<int32_t>(os, n.cfg.dir_sh_degree);
        put(os, n.encoder.bb_min);
        put(os, n.encoder.bb_max);
        put_vec(os, n.encoder.table);
        put_vec(os, n.stage_a.weights);
        put_vec(os, n.stage_b.weights);
        put_buf(os, st.adam.stage_a);
        put_buf(os, st.adam.stage_b);
        put<uint64_t>(os, st.adam.table.size());
        for (const auto& [k, mv] : st.adam.table) {
            put<int64_t>(os, k);
            put<double>(os, mv.first);
            put<double>(os, mv.second);
        }
    }
    put_vec(os, st.densify_grad_accum);
    put<uint64_t>(os, st.densify_count.size());
    os.write(reinterpret_cast<const char*>(st.densify_count.data()),
             static_cast<std::streamsize>(st.densify_count.size() * 4));
    std::ostringstream rs;
    rs << st.rng;
    const std::string rng_text = rs.str();
    put<uint32_t>(os, static_cast<uint32_t>(rng_text.size()));
    os.write(rng_text.data(), static_cast<std::streamsize>(rng_text.size()));
    put<double>(os, st.scene_extent);
    if (!os) throw ValidationError("save_checkpoint: write failure for '" + path + "'");
}

struct Checkpoint {
    TrainState state;
    uint64_t config_hash = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValidationError("load_checkpoint: missing file '" + path + "'");
    using namespace detail;
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw ValidationError("load_checkpoint: '" + path + "' is not a checkpoint");
    const auto version = get<uint32_t>(is);
    if (version != kCkptVersion)
        throw ValidationError("load_checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    TrainState& st = ck.state;
    ck.config_hash = get<uint64_t>(is);
    st.iter = get<int64_t>(is);
    const bool neural_mode = get<uint8_t>(is) != 0;
    st.field.color_mode = neural_mode ? ColorMode::Neural : ColorMode::Sh;
    st.field.sh_degree = get<int32_t>(is);
    const auto n = get<uint64_t>(is);
    const auto k = get<int32_t>(is);
    st.field.primitives.resize(n);
    for (auto& p : st.field.primitives) {
        p.center = get<Vec3>(is);
        p.log_scale = get<Vec3>(is);
        p.rotation = get<Vec4>(is);
        p.opacity_logit = get<double>(is);
        p.color_params.resize(k);
        is.read(reinterpret_cast<char*>(p.color_params.data()), static_cast<std::streamsize>(k) * 8);
    }
    st.adam.step_count = get<int64_t>(is);
    st.adam.center = get_buf(is);
    st.adam.log_scale = get_buf(is);
    st.adam.rotation = get_buf(is);
    st.adam.opacity = get_buf(is);
    st.adam.color = get_buf(is);
    if (neural_mode) {
        auto& nn = st.neural;
        nn.cfg.grid.levels = get<int32_t>(is);
        nn.cfg.grid.base_resolution = get<int32_t>(is);
        nn.cfg.grid.max_resolution = get<int32_t>(is);
        nn.cfg.grid.log2_table_size = get<int32_t>(is);
        nn.cfg.grid.features_per_entry = get<int32_t>(is);
        nn.cfg.mlp_width = get<int32_t>(is);
        nn.cfg.feature_dim = get<int32_t>(is);
        nn.cfg.stage_a_layers = get<int32_t>(is);
        nn.cfg.stage_b_layers = get<int32_t>(is);
        nn.cfg.dir_sh_degree = get<int32_t>(is);
        const Vec3 bbmin = get<Vec3>(is);
        const Vec3 bbmax = get<Vec3>(is);
        nn.init(0, Aabb{bbmin, bbmax});  // sizes/resolutions; contents overwritten below
        nn.encoder.table = get_vec(is);
        nn.stage_a.weights = get_vec(is);
        nn.stage_b.weights = get_vec(is);
        st.adam.stage_a = get_buf(is);
        st.adam.stage_b = get_buf(is);
        const auto cnt = get<uint64_t>(is);
        for (uint64_t i = 0; i < cnt; ++i) {
            const auto key = get<int64_t>(is);
            const auto m = get<double>(is);
            const auto v = get<double>(is);
            st.adam.table[key] = {m, v};
        }
        nn.invalidate();
    }
    st.densify_grad_accum = get_vec(is);
    const auto dc = get<uint64_t>(is);
    st.densify_count.resize(dc);
    is.read(reinterpret_cast<char*>(st.densify_count.data()), static_cast<std::streamsize>(dc) * 4);
    const auto rng_len = get<uint32_t>(is);
    std::string rng_text(rng_len, '\0');
    is.read(rng_text.data(), rng_len);
    std::istringstream rs(rng_text);
    rs >> st.rng;
    st.scene_extent = get<double>(is);
    if (!is) throw ValidationError("load_checkpoint: truncated file '" + path + "'");
    return ck;
}

}  // namespace dsplat
