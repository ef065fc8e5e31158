#pragma once

#include "head360/dataset.hpp"
#include "head360/metrics.hpp"
#include "head360/optim.hpp"
#include "head360/texture.hpp"
#include "head360/volume.hpp"

#include <functional>
#include <unordered_map>

namespace head360 {

// ---------------------------------------------------------------------------
// Photometric L1 loss and its reverse pass over a batch of rays.

struct RayTarget {
    Ray ray;
    Vec3 rgb = Vec3::Zero();
    std::uint64_t key = 0;
};

/// Mean L1 over rays and channels. `weight` * dLoss/dparams is accumulated into the gradient sinks; the
/// subgradient at an exact match is 0.
inline double l1_backward(const Scene& scene, std::span<const RayTarget> targets, const RenderConfig& cfg, double weight,
                          BranchGradients& head_grad, BranchGradients* hair_grad) {
    if (targets.empty()) return 0.0;
    if (cfg.jitter) fail(Errc::invalid_argument, "gradient passes require deterministic sampling (jitter off)");
    const double k = 1.0 / (3.0 * double(targets.size()));
    RayTrace tr;
    double loss = 0;
    for (const auto& t : targets) {
        const RayOutput o = render_ray(scene, t.ray, cfg, t.key, &tr);
        Vec3 d_rgb;
        for (int c = 0; c < 3; ++c) {
            const double d = o.rgb[c] - t.rgb[c];
            loss += std::abs(d) * k;
            d_rgb[c] = weight * k * double((d > 0) - (d < 0));
        }
        if (d_rgb.isZero()) continue;
        render_ray_backward(scene, tr, cfg, d_rgb, 0.0, head_grad, hair_grad);
    }
    return loss;
}

/// Gradients of the mean-L1 photometric loss keyed by parameter block. With a head raster map the
/// plane gradients are also pulled back onto the per-vertex features ("texture").
struct BackwardRenderInput {
    const Scene* scene = nullptr;
    std::span<const RayTarget> targets;
    RenderConfig render;
    const PlaneRasterMap* head_map = nullptr; // optional
    int texture_vertices = 0;
    double weight = 1.0;
};

inline GradientTape backward_render(const BackwardRenderInput& in, double* loss_out = nullptr) {
    const Scene& sc = *in.scene;
    BranchGradients head, hair;
    head.planes.assign(sc.head.planes->data.size(), 0.0);
    head.decoder.assign(sc.head.decoder->params.size(), 0.0);
    if (sc.hair) {
        hair.planes.assign(sc.hair->planes->data.size(), 0.0);
        hair.decoder.assign(sc.hair->decoder->params.size(), 0.0);
    }
    const double loss = l1_backward(sc, in.targets, in.render, in.weight, head, sc.hair ? &hair : nullptr);
    if (loss_out) *loss_out = loss;
    GradientTape tape;
    if (in.head_map) {
        const int C = sc.head.planes->channels;
        auto& tg = tape.block("texture", std::size_t(in.texture_vertices) * C);
        raster_map_backward(*in.head_map, C, head.planes, tg);
    }
    tape.blocks["head_planes"] = std::move(head.planes);
    tape.blocks["head_decoder"] = std::move(head.decoder);
    if (sc.hair) {
        tape.blocks["hair_planes"] = std::move(hair.planes);
        tape.blocks["hair_decoder"] = std::move(hair.decoder);
    }
    tape.check_finite();
    return tape;
}

// ---------------------------------------------------------------------------
// Finite-difference check of every parameter block on a small random scene.

struct GradcheckOptions {
    int resolution = 16;
    int channels = 4;
    int rays = 32;
    int samples = 16;
    std::uint64_t seed = 0;
    int coordinates = 200;
    double step = 5e-3;
    double abs_floor = 1e-7; // relative error denominators never drop below this
};

struct GradcheckEntry {
    std::string block;
    std::size_t index = 0;
    double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    std::map<std::string, double> max_rel_by_block;
    double max_rel_error = 0;
    double loss = 0;
};

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
    if (opt.resolution < 2 || opt.channels < 1 || opt.rays < 1 || opt.samples < 2 || opt.coordinates < 1)
        fail(Errc::invalid_argument, "gradcheck options out of range");
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int C = opt.channels, R = opt.resolution;

    // head: small icosphere carrying a random texture, rasterized into the planes
    TriMesh mesh = make_icosphere(2);
    for (auto& v : mesh.vertices) v *= 0.55;
    NeuralTexture tex = NeuralTexture::zeros(static_cast<int>(mesh.vertex_count()), C);
    for (auto& f : tex.features) f = static_cast<float>(0.8 * gauss(rng));
    const PlaneRasterMap map = build_plane_raster_map(mesh.vertices, mesh.faces, R, Bbox{});
    HexPlanes head = HexPlanes::zeros(R, C);
    apply_raster_map(map, tex, head);
    HexPlanes hair = HexPlanes::zeros(R, C);
    for (auto& v : hair.data) v = static_cast<float>(0.8 * gauss(rng));
    FieldDecoder head_dec = FieldDecoder::random(C, rng(), 1.0), hair_dec = FieldDecoder::random(C, rng(), 1.0);
    head_dec.params[head_dec.bias_offset()] = 0.5f;
    hair_dec.params[hair_dec.bias_offset()] = -0.5f;

    RenderConfig rc;
    rc.samples = opt.samples;
    const Camera cam = Camera::look_at(rig_position(35.0, 10.0, 2.7), Vec3::Zero(), Intrinsics::from_fov(30.0, 16, 16));
    std::vector<RayTarget> targets(opt.rays);
    {
        const Scene sc{{&head, &head_dec}, FieldRef{&hair, &hair_dec}};
        for (auto& t : targets) {
            t.ray = cam.generate_ray({2.0 + 12.0 * uni(rng), 2.0 + 12.0 * uni(rng)}, rc.near, rc.far);
            const Vec3 rgb = render_ray(sc, t.ray, rc).rgb;
            // offsets keep every residual well away from the L1 kink
            for (int c = 0; c < 3; ++c) t.rgb[c] = rgb[c] + (uni(rng) < 0.5 ? -1 : 1) * (0.15 + 0.2 * uni(rng));
        }
    }

    auto loss_at = [&]() {
        apply_raster_map(map, tex, head);
        const Scene sc{{&head, &head_dec}, FieldRef{&hair, &hair_dec}};
        double loss = 0;
        for (const auto& t : targets) {
            const Vec3 rgb = render_ray(sc, t.ray, rc).rgb;
            for (int c = 0; c < 3; ++c) loss += std::abs(rgb[c] - t.rgb[c]);
        }
        return loss / (3.0 * targets.size());
    };

    GradcheckReport rep;
    const Scene sc{{&head, &head_dec}, FieldRef{&hair, &hair_dec}};
    const GradientTape tape = backward_render({&sc, targets, rc, &map, tex.vertex_count, 1.0}, &rep.loss);

    // blocks checked: texture features, the planes they produce (as free values), decoders and hair planes
    struct Block {
        std::string name;
        std::span<float> params;
        bool derived_head_planes;
    };
    std::vector<Block> blocks{{"texture", tex.features, false},
                              {"head_planes", head.data, true},
                              {"head_decoder", head_dec.params, false},
                              {"hair_planes", hair.data, false},
                              {"hair_decoder", hair_dec.params, false}};
    const int per_block = std::max(1, opt.coordinates / int(blocks.size()));
    for (auto& b : blocks) {
        const auto& g = tape.blocks.at(b.name);
        std::vector<std::size_t> touched;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (g[i] != 0.0) touched.push_back(i);
        for (int k = 0; k < per_block; ++k) {
            std::size_t idx;
            if (!touched.empty() && k % 4 != 3) idx = touched[rng() % touched.size()];
            else idx = rng() % b.params.size();
            const float orig = b.params[idx];
            auto eval = [&]() {
                if (!b.derived_head_planes) return loss_at();
                // planes are perturbed directly, so the texture must not overwrite them
                const Scene s2{{&head, &head_dec}, FieldRef{&hair, &hair_dec}};
                double loss = 0;
                for (const auto& t : targets) {
                    const Vec3 rgb = render_ray(s2, t.ray, rc).rgb;
                    for (int c = 0; c < 3; ++c) loss += std::abs(rgb[c] - t.rgb[c]);
                }
                return loss / (3.0 * targets.size());
            };
            auto central = [&](double h) {
                const float up = static_cast<float>(orig + h), dn = static_cast<float>(orig - h);
                b.params[idx] = up;
                const double lp = eval();
                b.params[idx] = dn;
                const double lm = eval();
                return (lp - lm) / (double(up) - double(dn));
            };
            if (b.derived_head_planes) apply_raster_map(map, tex, head);
            // Richardson extrapolation cancels the h^2 term of the central difference
            const double numeric = (4.0 * central(opt.step) - central(2.0 * opt.step)) / 3.0;
            b.params[idx] = orig;
            const double analytic = g[idx];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.abs_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            rep.entries.push_back({b.name, idx, analytic, numeric, rel});
            rep.max_rel_by_block[b.name] = std::max(rep.max_rel_by_block[b.name], rel);
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
        }
        apply_raster_map(map, tex, head);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Trained library (checkpoint contents).

struct HairEntry {
    std::string id;
    HexPlanes planes;
    FieldDecoder decoder;
};

struct HeadLibrary {
    BilinearModel model;
    RasterConfig raster;
    RenderConfig render;
    FieldDecoder head_decoder;
    std::vector<int> texture_identities; // texture k was trained on identity texture_identities[k]
    std::vector<NeuralTexture> textures;
    TextureGenerator generator;
    std::vector<TextureCode> texture_codes;
    std::vector<HairEntry> hair; // "bald" is implicit and never stored
    std::vector<Camera> cameras;
    int rig_yaw_count = 0;
    std::vector<double> rig_pitches;
    double rig_radius = 0;
    std::vector<int> landmarks;
    nlohmann::json report = nlohmann::json::object();

    std::string texture_id(std::size_t k) const { return std::to_string(texture_identities.at(k)); }
    std::size_t texture_index(std::string_view id) const {
        for (std::size_t k = 0; k < textures.size(); ++k)
            if (texture_id(k) == id) return k;
        fail(Errc::not_found, "unknown texture id '{}'", id);
    }
    std::vector<std::string> hairstyle_ids() const {
        std::vector<std::string> ids{"bald"};
        for (const auto& h : hair) ids.push_back(h.id);
        return ids;
    }
    /// nullptr for "bald"; throws not_found for an unknown id.
    const HairEntry* find_hair(std::string_view id) const {
        if (id == "bald") return nullptr;
        for (const auto& h : hair)
            if (h.id == id) return &h;
        fail(Errc::not_found, "unknown hairstyle id '{}'", id);
    }
    ShapeCode identity_shape(std::size_t texture_k) const { return model.identity_code(texture_identities.at(texture_k)); }
};

inline HexPlanes empty_planes_like(const RasterConfig& cfg, int channels) {
    return HexPlanes::zeros(cfg.resolution, channels, cfg.bbox, cfg.blend_width);
}

inline void save_library(const HeadLibrary& lib, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "textures", ec);
    fs::create_directories(dir / "hair", ec);
    if (ec) fail(Errc::io, "cannot create checkpoint directory '{}': {}", dir.string(), ec.message());
    save_model(lib.model, dir / "model.bin");
    save_decoder(lib.head_decoder, dir / "decoder.bin");
    if (lib.generator.code_dim > 0) save_generator(lib.generator, dir / "generator.bin");
    for (std::size_t k = 0; k < lib.textures.size(); ++k)
        save_texture(lib.textures[k], dir / "textures" / (lib.texture_id(k) + ".bin"));
    for (const auto& h : lib.hair) save_hexplanes(h.planes, h.decoder, dir / "hair" / (h.id + ".bin"));
    write_file(dir / "cameras.json", cameras_to_json(lib.cameras).dump(2));
    write_file(dir / "landmarks.json", nlohmann::json{{"vertices", lib.landmarks}}.dump(2));

    nlohmann::json j = lib.report;
    j["texture_ids"] = nlohmann::json::array();
    for (std::size_t k = 0; k < lib.textures.size(); ++k) j["texture_ids"].push_back(lib.texture_id(k));
    j["hairstyle_ids"] = lib.hairstyle_ids();
    std::vector<std::vector<double>> codes;
    for (const auto& c : lib.texture_codes) codes.emplace_back(c.values.data(), c.values.data() + c.values.size());
    j["texture_codes"] = codes;
    j["raster"] = {{"resolution", lib.raster.resolution},
                   {"bbox_min", {lib.raster.bbox.min.x(), lib.raster.bbox.min.y(), lib.raster.bbox.min.z()}},
                   {"bbox_max", {lib.raster.bbox.max.x(), lib.raster.bbox.max.y(), lib.raster.bbox.max.z()}},
                   {"blend_width", lib.raster.blend_width}};
    j["render"] = {{"samples", lib.render.samples},
                   {"near", lib.render.near},
                   {"far", lib.render.far},
                   {"background", {lib.render.background.x(), lib.render.background.y(), lib.render.background.z()}}};
    j["rig"] = {{"yaw_count", lib.rig_yaw_count}, {"pitch_angles", lib.rig_pitches}, {"radius", lib.rig_radius}};
    write_file(dir / "report.json", j.dump(2));
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) fail(Errc::not_found, "missing file '{}'", p.string());
    const auto b = read_file(p);
    try {
        return nlohmann::json::parse(b.begin(), b.end());
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::parse, "{}: {}", p.string(), e.what());
    }
}

inline HeadLibrary load_library(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    HeadLibrary lib;
    const nlohmann::json j = read_json(dir / "report.json");
    try {
        const auto& r = j.at("raster");
        lib.raster.resolution = r.at("resolution").get<int>();
        const auto mn = r.at("bbox_min").get<std::vector<double>>(), mx = r.at("bbox_max").get<std::vector<double>>();
        lib.raster.bbox = Bbox{Vec3(mn.at(0), mn.at(1), mn.at(2)), Vec3(mx.at(0), mx.at(1), mx.at(2))};
        lib.raster.blend_width = r.at("blend_width").get<double>();
        const auto& rc = j.at("render");
        lib.render.samples = rc.at("samples").get<int>();
        lib.render.near = rc.at("near").get<double>();
        lib.render.far = rc.at("far").get<double>();
        const auto bg = rc.at("background").get<std::vector<double>>();
        lib.render.background = Vec3(bg.at(0), bg.at(1), bg.at(2));
        const auto& rig = j.at("rig");
        lib.rig_yaw_count = rig.at("yaw_count").get<int>();
        lib.rig_pitches = rig.at("pitch_angles").get<std::vector<double>>();
        lib.rig_radius = rig.at("radius").get<double>();
        for (const auto& id : j.at("texture_ids")) lib.texture_identities.push_back(std::stoi(id.get<std::string>()));
        for (const auto& c : j.value("texture_codes", std::vector<std::vector<double>>{}))
            lib.texture_codes.push_back({Eigen::Map<const Eigen::VectorXd>(c.data(), Eigen::Index(c.size()))});
        for (const auto& h : j.at("hairstyle_ids")) {
            const auto id = h.get<std::string>();
            if (id == "bald") continue;
            auto [planes, dec] = load_hexplanes(dir / "hair" / (id + ".bin"), lib.raster.bbox, lib.raster.blend_width);
            lib.hair.push_back({id, std::move(planes), std::move(dec)});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "{}: {}", (dir / "report.json").string(), e.what());
    } catch (const std::invalid_argument&) {
        fail(Errc::parse, "{}: non-numeric texture id", (dir / "report.json").string());
    }
    lib.report = j;
    lib.model = load_model(dir / "model.bin");
    lib.head_decoder = load_decoder(dir / "decoder.bin");
    if (fs::exists(dir / "generator.bin")) lib.generator = load_generator(dir / "generator.bin");
    for (std::size_t k = 0; k < lib.texture_identities.size(); ++k) {
        lib.textures.push_back(load_texture(dir / "textures" / (lib.texture_id(k) + ".bin")));
        if (lib.textures.back().vertex_count != lib.model.vertex_count)
            fail(Errc::dimension_mismatch, "texture {} has {} vertices, model has {}", lib.texture_id(k),
                 lib.textures.back().vertex_count, lib.model.vertex_count);
    }
    lib.cameras = cameras_from_json(read_json(dir / "cameras.json"));
    lib.landmarks = read_json(dir / "landmarks.json").at("vertices").get<std::vector<int>>();
    return lib;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    int channels = 8;
    RasterConfig raster;
    RenderConfig render;
    AdamOptions adam{0.01};
    int head_steps = 3000;
    int hair_steps = 1500;
    int rays_per_step = 1024;
    double lambda_density = 0.25;
    double lambda_gan = 0.01; // kept for documentation; adversarial terms are not used
    int density_pairs = 256;
    double density_perturbation = 0.01;
    std::uint64_t seed = 0;
    std::vector<int> identities;  // empty = all
    std::vector<int> expressions; // empty = all
    std::vector<int> train_views; // empty = default_train_views
    bool single_branch = false;   // ablation: head branch only, trained on full images, no hair phase
    int texture_code_dim = 0;     // 0 = number of trained identities
    double texture_init_scale = 0.1;
    double decoder_init_scale = 0.5;
    int rank = 0;                 // 0 = number of dataset identities
    int log_every = 100;
    int checkpoint_every = 0;          // 0 = only at the end
    std::filesystem::path checkpoint_dir; // where periodic checkpoints go

    void validate() const {
        if (channels < 1 || channels > 256) fail(Errc::invalid_argument, "channels must be in [1, 256]");
        if (head_steps < 0 || hair_steps < 0) fail(Errc::invalid_argument, "step counts must be >= 0");
        if (rays_per_step < 1) fail(Errc::invalid_argument, "rays per step must be >= 1");
        if (lambda_density < 0 || lambda_gan < 0) fail(Errc::invalid_argument, "loss weights must be nonnegative");
        if (!(adam.lr > 0)) fail(Errc::invalid_argument, "learning rate must be positive");
        render.validate();
        if (render.jitter) fail(Errc::invalid_argument, "training uses deterministic sampling (jitter off)");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"channels", c.channels},
            {"resolution", c.raster.resolution},
            {"blend_width", c.raster.blend_width},
            {"samples", c.render.samples},
            {"near", c.render.near},
            {"far", c.render.far},
            {"lr", c.adam.lr},
            {"head_steps", c.head_steps},
            {"hair_steps", c.hair_steps},
            {"rays_per_step", c.rays_per_step},
            {"lambda_density", c.lambda_density},
            {"lambda_gan", c.lambda_gan},
            {"density_pairs", c.density_pairs},
            {"density_perturbation", c.density_perturbation},
            {"seed", c.seed},
            {"identities", c.identities},
            {"expressions", c.expressions},
            {"train_views", c.train_views},
            {"single_branch", c.single_branch},
            {"texture_code_dim", c.texture_code_dim},
            {"rank", c.rank}};
}

/// Alternate yaws on the outer pitch rings (all yaws on a single ring).
inline std::vector<int> default_train_views(int yaw_count, int pitch_count) {
    std::vector<int> v;
    if (pitch_count >= 3) {
        for (int p : {0, pitch_count - 1})
            for (int y = 0; y < yaw_count; y += 2) v.push_back(p * yaw_count + y);
    } else {
        for (int y = 0; y < yaw_count; y += 2) v.push_back(y);
    }
    return v;
}

/// Three views never used for training: odd yaws spread around the middle ring.
inline std::vector<int> default_heldout_views(int yaw_count, int pitch_count) {
    const int row = pitch_count / 2;
    std::vector<int> v;
    for (int k = 0; k < 3; ++k) {
        int y = (yaw_count * k) / 3 + 1;
        if (pitch_count < 3 && y % 2 == 0) ++y;
        v.push_back(row * yaw_count + (y % yaw_count));
    }
    return v;
}

/// Deterministic per-step random stream, so a resumed run replays exactly.
inline std::mt19937_64 step_rng(std::uint64_t seed, int phase, std::int64_t step) {
    std::uint64_t x = seed * 0x9E3779B97F4A7C15ull + std::uint64_t(phase) * 0xD1B54A32D192ED03ull + std::uint64_t(step);
    std::seed_seq seq{std::uint32_t(detail::splitmix64(x)), std::uint32_t(detail::splitmix64(x)),
                      std::uint32_t(detail::splitmix64(x)), std::uint32_t(detail::splitmix64(x))};
    return std::mt19937_64(seq);
}

/// Images of the dataset loaded on demand.
class DatasetImages {
public:
    DatasetImages(std::filesystem::path root, DatasetManifest manifest)
        : root_(std::move(root)), man_(std::move(manifest)) {}

    const DatasetManifest& manifest() const { return man_; }
    const std::filesystem::path& root() const { return root_; }

    const Image& full(int i, int j, int cam) { return image(0, i, j, cam); }
    const Image& bald(int i, int j, int cam) { return image(1, i, j, cam); }
    const Mask& mask(int i, int j, int cam) {
        const auto key = make_key(2, i, j, cam);
        auto it = masks_.find(key);
        if (it == masks_.end()) it = masks_.emplace(key, load_png_mask(root_ / man_.image(i, j, cam).mask)).first;
        return it->second;
    }

private:
    static std::uint64_t make_key(int kind, int i, int j, int cam) {
        return (std::uint64_t(kind) << 48) | (std::uint64_t(i) << 32) | (std::uint64_t(j) << 16) | std::uint64_t(cam);
    }
    const Image& image(int kind, int i, int j, int cam) {
        const auto key = make_key(kind, i, j, cam);
        auto it = images_.find(key);
        if (it == images_.end()) {
            const auto& rec = man_.image(i, j, cam);
            it = images_.emplace(key, load_png(root_ / (kind == 0 ? rec.image : rec.bald))).first;
        }
        return it->second;
    }

    std::filesystem::path root_;
    DatasetManifest man_;
    std::unordered_map<std::uint64_t, Image> images_;
    std::unordered_map<std::uint64_t, Mask> masks_;
};

struct TrainProgress {
    std::string phase;
    std::int64_t step = 0, total = 0;
    double loss = 0;
};

struct TrainResult {
    HeadLibrary library;
    std::vector<double> head_losses, hair_losses;
    std::string optimizer_state; // serialized Adam state at the end of training
};

namespace detail {

inline Vec3 pixel_rgb(const Image& img, int x, int y) { return Vec3(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)); }

inline std::vector<int> all_or(const std::vector<int>& v, int count, const char* what) {
    if (v.empty()) {
        std::vector<int> out(count);
        std::iota(out.begin(), out.end(), 0);
        return out;
    }
    for (int x : v)
        if (x < 0 || x >= count) fail(Errc::invalid_argument, "{} index {} out of range [0, {})", what, x, count);
    return v;
}

} // namespace detail

/// Training state to continue from: parameters, optimizer moments and completed step counts.
struct TrainResume {
    HeadLibrary library;
    std::vector<char> optimizer;
    int head_steps_done = 0, hair_steps_done = 0;
    std::vector<double> head_losses, hair_losses;
};

inline void save_training_checkpoint(const TrainResult& r, int head_done, int hair_done, const std::filesystem::path& dir) {
    HeadLibrary lib = r.library;
    lib.report["progress"] = {{"head_steps_done", head_done}, {"hair_steps_done", hair_done}};
    lib.report["head_losses"] = r.head_losses;
    lib.report["hair_losses"] = r.hair_losses;
    save_library(lib, dir);
    write_file(dir / "optimizer.bin", r.optimizer_state);
}

inline TrainResume load_training_checkpoint(const std::filesystem::path& dir) {
    TrainResume t;
    t.library = load_library(dir);
    t.optimizer = read_file(dir / "optimizer.bin");
    try {
        const auto& p = t.library.report.at("progress");
        t.head_steps_done = p.at("head_steps_done").get<int>();
        t.hair_steps_done = p.at("hair_steps_done").get<int>();
        t.head_losses = t.library.report.value("head_losses", std::vector<double>{});
        t.hair_losses = t.library.report.value("hair_losses", std::vector<double>{});
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "{}: no resumable progress: {}", (dir / "report.json").string(), e.what());
    }
    return t;
}

/// Head branch for texture k posed with blend b.
inline ConditionedField condition_library_head(const HeadLibrary& lib, const ShapeCode& s, const BlendCode& b,
                                               const NeuralTexture& tex) {
    return condition_field(lib.model, s, b, tex, lib.raster);
}

/// Two-phase training: (A) per-identity textures and the shared head decoder against bald renders,
/// (B) per-hairstyle free hex-planes with a frozen head. Hair-mask pixels are fit to the full render;
/// all other pixels are fit to the frozen head-only render, so hair stays empty where no hair is seen.
inline TrainResult train_head_library(const std::filesystem::path& data_root, const TrainConfig& cfg,
                                      const std::function<void(const TrainProgress&)>& progress = {},
                                      const TrainResume* resume = nullptr) {
    cfg.validate();
    DatasetImages data(data_root, load_manifest(data_root));
    const DatasetManifest& man = data.manifest();
    const DatasetSpec& spec = man.spec;
    const std::vector<int> ids = detail::all_or(cfg.identities, spec.identities, "identity");
    const std::vector<int> exprs = detail::all_or(cfg.expressions, spec.expressions, "expression");
    const int cams = static_cast<int>(spec.camera_count());
    std::vector<int> views = cfg.train_views.empty()
                                 ? default_train_views(spec.yaw_count, static_cast<int>(spec.pitch_angles.size()))
                                 : cfg.train_views;
    for (int v : views)
        if (v < 0 || v >= cams) fail(Errc::invalid_argument, "train view {} out of range [0, {})", v, cams);

    TrainResult out;
    HeadLibrary& lib = out.library;
    {
        const VertexTensor tensor = build_vertex_tensor(data_root);
        lib.model = build_bilinear_model(tensor, cfg.rank > 0 ? cfg.rank : spec.identities);
    }
    const CameraRig rig = spec.rig();
    lib.cameras = rig.cameras;
    lib.rig_yaw_count = spec.yaw_count;
    lib.rig_pitches = spec.pitch_angles;
    lib.rig_radius = spec.radius;
    lib.landmarks = load_landmark_vertices(data_root);
    lib.raster = cfg.raster;
    lib.render = cfg.render;
    const int C = cfg.channels;
    const int N = lib.model.vertex_count;

    std::mt19937_64 init_rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, cfg.texture_init_scale);
    lib.head_decoder = FieldDecoder::random(C, init_rng(), cfg.decoder_init_scale);
    for (int i : ids) {
        NeuralTexture t = NeuralTexture::zeros(N, C);
        for (auto& f : t.features) f = static_cast<float>(gauss(init_rng));
        lib.textures.push_back(std::move(t));
        lib.texture_identities.push_back(i);
    }

    // hair entries exist from the start so a checkpoint taken in either phase is complete
    std::vector<int> styles;
    if (!cfg.single_branch) {
        for (int i : ids) {
            const int st = spec.hairstyle_of(i);
            if (st > 0 && std::find(styles.begin(), styles.end(), st) == styles.end()) styles.push_back(st);
        }
        std::sort(styles.begin(), styles.end());
    }
    for (int st : styles) {
        HairEntry e{hairstyle_name(st), empty_planes_like(cfg.raster, C),
                    FieldDecoder::random(C, init_rng(), cfg.decoder_init_scale)};
        lib.hair.push_back(std::move(e));
    }

    Adam adam(cfg.adam);
    int head_start = 0, hair_start = 0;
    if (resume) {
        const HeadLibrary& r = resume->library;
        if (r.texture_identities != lib.texture_identities || r.textures.size() != lib.textures.size() ||
            r.hair.size() != lib.hair.size() || r.head_decoder.params.size() != lib.head_decoder.params.size())
            fail(Errc::dimension_mismatch, "checkpoint does not match the training configuration");
        lib.textures = r.textures;
        lib.head_decoder = r.head_decoder;
        for (std::size_t h = 0; h < lib.hair.size(); ++h) {
            if (r.hair[h].id != lib.hair[h].id || r.hair[h].planes.data.size() != lib.hair[h].planes.data.size())
                fail(Errc::dimension_mismatch, "checkpoint hair entry {} does not match", r.hair[h].id);
            lib.hair[h].planes.data = r.hair[h].planes.data;
            lib.hair[h].decoder = r.hair[h].decoder;
        }
        adam.deserialize(resume->optimizer, "optimizer.bin");
        head_start = resume->head_steps_done;
        hair_start = resume->hair_steps_done;
        out.head_losses = resume->head_losses;
        out.hair_losses = resume->hair_losses;
    }
    auto finish_report = [&] {
        const auto st = adam.serialize();
        out.optimizer_state.assign(st.begin(), st.end());
        lib.report = {{"config", to_json(cfg)},
                      {"train_views", views},
                      {"heldout_views", default_heldout_views(spec.yaw_count, static_cast<int>(spec.pitch_angles.size()))},
                      {"head_losses", out.head_losses},
                      {"hair_losses", out.hair_losses},
                      {"dataset_seed", spec.seed}};
    };
    auto maybe_checkpoint = [&](int head_done, int hair_done, bool boundary) {
        if (cfg.checkpoint_every <= 0 || cfg.checkpoint_dir.empty()) return;
        const int done = head_done + hair_done;
        if (!boundary && done % cfg.checkpoint_every != 0) return;
        finish_report();
        save_training_checkpoint(out, head_done, hair_done, cfg.checkpoint_dir);
    };

    // geometry-only raster maps per (identity, expression), built on first use
    std::map<std::pair<int, int>, PlaneRasterMap> maps;
    auto raster_map = [&](int i, int j) -> const PlaneRasterMap& {
        auto it = maps.find({i, j});
        if (it == maps.end()) {
            const auto verts = synthesize_vertices(lib.model, lib.model.identity_code(i), lib.model.unit_blend(j));
            it = maps.emplace(std::pair{i, j}, build_plane_raster_map(verts, lib.model.faces, cfg.raster.resolution,
                                                                      cfg.raster.bbox))
                     .first;
        }
        return it->second;
    };

    HexPlanes head_planes = empty_planes_like(cfg.raster, C);
    const Intrinsics K = spec.intrinsics();
    const int W = K.width, H = K.height;

    auto report = [&](const char* phase, std::int64_t step, std::int64_t total, double loss) {
        if (progress && (cfg.log_every > 0) && (step % cfg.log_every == 0 || step == total - 1))
            progress({phase, step, total, loss});
    };

    // Phase A
    BranchGradients head_grad;
    head_grad.planes.assign(head_planes.data.size(), 0.0);
    head_grad.decoder.assign(lib.head_decoder.params.size(), 0.0);
    std::vector<double> tex_grad(std::size_t(N) * C);
    std::vector<RayTarget> batch(cfg.rays_per_step);
    for (int step = head_start; step < cfg.head_steps; ++step) {
        auto rng = step_rng(cfg.seed, 1, step);
        const std::size_t k = rng() % ids.size();
        const int i = ids[k], j = exprs[rng() % exprs.size()], cam = views[rng() % views.size()];
        const PlaneRasterMap& map = raster_map(i, j);
        apply_raster_map(map, lib.textures[k], head_planes);
        const Image& target = cfg.single_branch ? data.full(i, j, cam) : data.bald(i, j, cam);
        const Camera& camera = rig.cameras[cam];
        for (auto& t : batch) {
            const int x = static_cast<int>(rng() % W), y = static_cast<int>(rng() % H);
            t.ray = camera.generate_ray({x + 0.5, y + 0.5}, cfg.render.near, cfg.render.far);
            t.rgb = detail::pixel_rgb(target, x, y);
        }
        head_grad.zero();
        const Scene scene{{&head_planes, &lib.head_decoder}, {}};
        double loss = l1_backward(scene, batch, cfg.render, 1.0, head_grad, nullptr);
        if (cfg.lambda_density > 0) {
            DensityRegOptions dro{cfg.density_pairs, cfg.density_perturbation, rng(), std::nullopt};
            loss += cfg.lambda_density *
                    density_regularizer(scene.head, dro, cfg.lambda_density, head_grad.planes, head_grad.decoder);
        }
        if (!std::isfinite(loss)) fail(Errc::numeric, "head phase diverged at step {} (loss {})", step, loss);
        std::fill(tex_grad.begin(), tex_grad.end(), 0.0);
        raster_map_backward(map, C, head_grad.planes, tex_grad);
        if (!all_finite(tex_grad)) fail(Errc::numeric, "non-finite gradient in parameter block 'texture/{}'", i);
        if (!all_finite(head_grad.decoder)) fail(Errc::numeric, "non-finite gradient in parameter block 'head_decoder'");
        adam.next_step();
        adam.apply<float>(fmt::format("texture/{}", i), lib.textures[k].features, tex_grad);
        adam.apply<float>("head_decoder", lib.head_decoder.params, head_grad.decoder);
        out.head_losses.push_back(loss);
        report("head", step, cfg.head_steps, loss);
        maybe_checkpoint(step + 1, 0, false);
    }

    // Phase B
    std::vector<std::size_t> hair_ids; // texture indices whose identity wears hair
    for (std::size_t k = 0; k < ids.size(); ++k)
        if (!cfg.single_branch && spec.hairstyle_of(ids[k]) > 0) hair_ids.push_back(k);
    const int hair_steps = hair_ids.empty() ? 0 : cfg.hair_steps;
    BranchGradients none, hair_grad;
    std::vector<int> mask_px, other_px;
    for (int step = hair_start; step < hair_steps; ++step) {
        auto rng = step_rng(cfg.seed, 2, step);
        const std::size_t k = hair_ids[rng() % hair_ids.size()];
        const int i = ids[k], j = exprs[rng() % exprs.size()], cam = views[rng() % views.size()];
        const int st = spec.hairstyle_of(i);
        HairEntry& hair = *std::find_if(lib.hair.begin(), lib.hair.end(),
                                        [&](const HairEntry& h) { return h.id == hairstyle_name(st); });
        apply_raster_map(raster_map(i, j), lib.textures[k], head_planes);
        const Image& full = data.full(i, j, cam);
        const Mask& mask = data.mask(i, j, cam);
        mask_px.clear();
        other_px.clear();
        for (int p = 0; p < W * H; ++p) (mask.data[p] ? mask_px : other_px).push_back(p);
        const Camera& camera = rig.cameras[cam];
        const Scene head_only{{&head_planes, &lib.head_decoder}, {}};
        const Scene scene{{&head_planes, &lib.head_decoder}, FieldRef{&hair.planes, &hair.decoder}};
        const int n_mask = mask_px.empty() ? 0 : cfg.rays_per_step / 2;
        for (int b = 0; b < cfg.rays_per_step; ++b) {
            const bool in_mask = b < n_mask;
            const auto& pool = in_mask ? mask_px : other_px;
            const int p = pool[rng() % pool.size()];
            const int x = p % W, y = p / W;
            auto& t = batch[b];
            t.ray = camera.generate_ray({x + 0.5, y + 0.5}, cfg.render.near, cfg.render.far);
            t.rgb = in_mask ? detail::pixel_rgb(full, x, y) : render_ray(head_only, t.ray, cfg.render).rgb;
        }
        if (hair_grad.planes.size() != hair.planes.data.size()) {
            hair_grad.planes.assign(hair.planes.data.size(), 0.0);
            hair_grad.decoder.assign(hair.decoder.params.size(), 0.0);
        }
        hair_grad.zero();
        double loss = l1_backward(scene, batch, cfg.render, 1.0, none, &hair_grad);
        if (cfg.lambda_density > 0) {
            DensityRegOptions dro{cfg.density_pairs, cfg.density_perturbation, rng(), std::nullopt};
            loss += cfg.lambda_density * density_regularizer(FieldRef{&hair.planes, &hair.decoder}, dro,
                                                             cfg.lambda_density, hair_grad.planes, hair_grad.decoder);
        }
        if (!std::isfinite(loss)) fail(Errc::numeric, "hair phase diverged at step {} (loss {})", step, loss);
        if (!all_finite(hair_grad.planes))
            fail(Errc::numeric, "non-finite gradient in parameter block 'hair/{}/planes'", hair.id);
        if (!all_finite(hair_grad.decoder))
            fail(Errc::numeric, "non-finite gradient in parameter block 'hair/{}/decoder'", hair.id);
        adam.next_step();
        adam.apply<float>(fmt::format("hair/{}/planes", hair.id), hair.planes.data, hair_grad.planes);
        adam.apply<float>(fmt::format("hair/{}/decoder", hair.id), hair.decoder.params, hair_grad.decoder);
        out.hair_losses.push_back(loss);
        report("hair", step, hair_steps, loss);
        maybe_checkpoint(cfg.head_steps, step + 1, false);
    }

    if (!lib.textures.empty()) {
        const int dt = cfg.texture_code_dim > 0 ? cfg.texture_code_dim : static_cast<int>(lib.textures.size());
        auto [gen, codes] = fit_texture_generator(lib.textures, dt);
        lib.generator = std::move(gen);
        lib.texture_codes = std::move(codes);
    }
    finish_report();
    lib.report["progress"] = {{"head_steps_done", cfg.head_steps}, {"hair_steps_done", hair_steps}};
    return out;
}

// ---------------------------------------------------------------------------
// Rendering from a library.

struct HeadInstance {
    ShapeCode s;
    BlendCode b;
    NeuralTexture texture;
    std::string hairstyle = "bald";
};

inline HeadInstance library_instance(const HeadLibrary& lib, std::size_t texture_k, int expression = 0,
                                     std::string hairstyle = "bald") {
    return {lib.identity_shape(texture_k), lib.model.unit_blend(expression), lib.textures.at(texture_k),
            std::move(hairstyle)};
}

inline RenderOutput render_instance(const HeadLibrary& lib, const HeadInstance& h, const Camera& cam,
                                    const RenderConfig& cfg, bool with_hair = true) {
    const ConditionedField head = condition_field(lib.model, h.s, h.b, h.texture, lib.raster);
    const HairEntry* hair = with_hair ? lib.find_hair(h.hairstyle) : nullptr;
    Scene sc{{&head.planes, &lib.head_decoder}, {}};
    if (hair) sc.hair = FieldRef{&hair->planes, &hair->decoder};
    return render_image(sc, cam, cfg);
}

} // namespace head360
