#pragma once

#include "head360/poisson.hpp"
#include "head360/training.hpp"

namespace head360 {

// ---------------------------------------------------------------------------
// Hairstyle matching on 16x16 silhouette descriptors.

inline constexpr int kDescriptorSize = 16;

/// Box-averages a per-pixel coverage map onto a 16x16 grid.
inline std::vector<double> silhouette_descriptor(std::span<const float> coverage, int width, int height) {
    if (coverage.size() != std::size_t(width) * height)
        fail(Errc::dimension_mismatch, "coverage has {} values for a {}x{} image", coverage.size(), width, height);
    const int D = kDescriptorSize;
    std::vector<double> sum(D * D, 0.0), area(D * D, 0.0);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int bx = x * D / width, by = y * D / height;
            sum[by * D + bx] += coverage[std::size_t(y) * width + x];
            area[by * D + bx] += 1.0;
        }
    for (int k = 0; k < D * D; ++k) sum[k] = area[k] > 0 ? sum[k] / area[k] : 0.0;
    return sum;
}

inline std::vector<double> silhouette_descriptor(const Mask& m) {
    std::vector<float> cov(m.data.begin(), m.data.end());
    return silhouette_descriptor(cov, m.width, m.height);
}

struct HairQuery {
    Mask silhouette;
    Camera camera;
};

/// Hair-only alpha of one library entry at a camera (all zero for bald).
inline std::vector<float> hair_alpha(const HeadLibrary& lib, std::string_view style, const Camera& cam,
                                     const RenderConfig& cfg) {
    const HairEntry* h = lib.find_hair(style);
    if (!h) return std::vector<float>(std::size_t(cam.width()) * cam.height(), 0.0f);
    const Scene sc{{&h->planes, &h->decoder}, {}};
    return render_image(sc, cam, cfg).image.alpha;
}

struct HairMatch {
    std::string id;
    std::vector<std::pair<std::string, double>> distances; // library order
};

/// Nearest library hairstyle by mean L1 between concatenated descriptors; ties go to the earlier entry.
inline HairMatch match_hairstyle(const HeadLibrary& lib, std::span<const HairQuery> queries,
                                 const RenderConfig& cfg) {
    if (queries.empty()) fail(Errc::invalid_argument, "hairstyle matching needs at least one silhouette");
    const auto styles = lib.hairstyle_ids();
    if (styles.empty()) fail(Errc::invalid_argument, "hairstyle library is empty");
    std::vector<std::vector<double>> query_desc;
    for (const auto& q : queries) {
        if (q.silhouette.width != q.camera.width() || q.silhouette.height != q.camera.height())
            fail(Errc::dimension_mismatch, "silhouette {}x{} does not match camera {}x{}", q.silhouette.width,
                 q.silhouette.height, q.camera.width(), q.camera.height());
        query_desc.push_back(silhouette_descriptor(q.silhouette));
    }
    HairMatch out;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& style : styles) {
        double dist = 0;
        std::size_t count = 0;
        for (std::size_t v = 0; v < queries.size(); ++v) {
            const auto alpha = hair_alpha(lib, style, queries[v].camera, cfg);
            const auto d = silhouette_descriptor(alpha, queries[v].camera.width(), queries[v].camera.height());
            for (std::size_t k = 0; k < d.size(); ++k) dist += std::abs(d[k] - query_desc[v][k]);
            count += d.size();
        }
        dist /= double(count);
        out.distances.emplace_back(style, dist);
        if (dist < best) {
            best = dist;
            out.id = style;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Single-image fitting.

struct FitConfig {
    ShapeFitOptions shape;
    int texture_steps = 400;
    double texture_lr = 0.01;
    int rays_per_step = 1024; // 0 = every bald-region pixel each step
    double lambda_photometric = 1.0;
    double lambda_density = 0.0;
    double lambda_gan = 0.01; // documented only
    bool poisson = false;
    std::uint64_t seed = 0;
    std::optional<std::size_t> init_texture; // default: drawn from the seed
    std::optional<std::string> hairstyle;    // skip matching when set

    void validate() const {
        if (texture_steps < 0) fail(Errc::invalid_argument, "texture steps must be >= 0");
        if (!(texture_lr > 0)) fail(Errc::invalid_argument, "texture learning rate must be positive");
        if (lambda_photometric < 0 || lambda_density < 0 || lambda_gan < 0)
            fail(Errc::invalid_argument, "loss weights must be nonnegative");
        if (rays_per_step < 0) fail(Errc::invalid_argument, "rays per step must be >= 0");
    }
};

struct FittedHead {
    ShapeCode s;
    NeuralTexture texture;
    std::string hairstyle = "bald";
    std::size_t init_texture = 0;
    nlohmann::json report = nlohmann::json::object();

    HeadInstance instance(const BilinearModel& m) const { return {s, m.neutral(), texture, hairstyle}; }
};

struct FitInput {
    Image image;
    Mask hair_mask; // 1 = hair
    std::vector<Landmark> landmarks;
    Camera camera;
};

inline FittedHead fit_single_image(const HeadLibrary& lib, const FitInput& in, const FitConfig& cfg,
                                   const std::function<void(double)>& progress = {}) {
    cfg.validate();
    if (in.landmarks.empty()) fail(Errc::invalid_argument, "fitting needs landmarks");
    if (lib.textures.empty()) fail(Errc::invalid_argument, "library has no trained textures");
    const int W = in.image.width, H = in.image.height;
    if (W != in.camera.width() || H != in.camera.height())
        fail(Errc::dimension_mismatch, "image {}x{} does not match camera {}x{}", W, H, in.camera.width(),
             in.camera.height());
    if (in.hair_mask.width != W || in.hair_mask.height != H)
        fail(Errc::dimension_mismatch, "mask {}x{} does not match image {}x{}", in.hair_mask.width, in.hair_mask.height,
             W, H);
    std::vector<int> bald_px;
    for (int p = 0; p < W * H; ++p)
        if (!in.hair_mask.data[p]) bald_px.push_back(p);
    if (bald_px.empty()) fail(Errc::invalid_argument, "bald region is empty after masking");

    FittedHead out;
    nlohmann::json rep;
    const RenderConfig& rc = lib.render;

    // Stage 1: shape from landmarks on the neutral blend; frozen afterwards
    const BlendCode b = lib.model.neutral();
    const ShapeFit sf = fit_shape_landmarks(lib.model, in.landmarks, in.camera, b, cfg.shape);
    out.s = sf.s;
    rep["stage1"] = {{"rms_residual_px", sf.rms_residual}, {"iterations", sf.iterations}};
    if (progress) progress(0.1);

    // Stage 2: texture from a random trained identity, optimized on the bald region
    std::mt19937_64 rng(cfg.seed);
    out.init_texture = cfg.init_texture ? *cfg.init_texture : std::size_t(rng() % lib.textures.size());
    if (out.init_texture >= lib.textures.size())
        fail(Errc::invalid_argument, "initial texture {} out of range", out.init_texture);
    out.texture = lib.textures[out.init_texture];
    ConditionedField head = condition_field(lib.model, out.s, b, out.texture, lib.raster);

    Image target = in.image;
    if (cfg.poisson) {
        const Scene sc{{&head.planes, &lib.head_decoder}, {}};
        const Image init = render_image(sc, in.camera, rc).image;
        Mask inner(W, H);
        for (int y = 1; y < H - 1; ++y)
            for (int x = 1; x < W - 1; ++x) inner.data[std::size_t(y) * W + x] = !in.hair_mask.data[std::size_t(y) * W + x];
        target = poisson_blend(in.image, init, inner);
    }
    auto psnr_bald = [&](const Image& img) { return psnr_masked(img, in.image, [&] {
                                                 Mask m(W, H);
                                                 for (int p : bald_px) m.data[p] = 1;
                                                 return m;
                                             }()); };
    {
        const Scene sc{{&head.planes, &lib.head_decoder}, {}};
        rep["stage2_init_psnr"] = psnr_bald(render_image(sc, in.camera, rc).image);
    }

    Adam adam({cfg.texture_lr});
    BranchGradients g;
    g.planes.assign(head.planes.data.size(), 0.0);
    std::vector<double> tex_grad(out.texture.features.size());
    std::vector<RayTarget> batch;
    std::vector<double> losses;
    const std::size_t B = cfg.rays_per_step == 0 ? bald_px.size() : std::size_t(cfg.rays_per_step);
    for (int step = 0; step < cfg.texture_steps; ++step) {
        auto srng = step_rng(cfg.seed, 3, step);
        batch.resize(B);
        for (std::size_t k = 0; k < B; ++k) {
            const int p = cfg.rays_per_step == 0 ? bald_px[k] : bald_px[srng() % bald_px.size()];
            const int x = p % W, y = p / W;
            batch[k].ray = in.camera.generate_ray({x + 0.5, y + 0.5}, rc.near, rc.far);
            batch[k].rgb = detail::pixel_rgb(target, x, y);
        }
        g.zero();
        const Scene sc{{&head.planes, &lib.head_decoder}, {}};
        double loss = l1_backward(sc, batch, rc, cfg.lambda_photometric, g, nullptr) * cfg.lambda_photometric;
        if (cfg.lambda_density > 0) {
            std::vector<double> no_decoder;
            DensityRegOptions dro;
            dro.seed = srng();
            loss += cfg.lambda_density * density_regularizer(sc.head, dro, cfg.lambda_density, g.planes, no_decoder);
        }
        std::fill(tex_grad.begin(), tex_grad.end(), 0.0);
        raster_map_backward(head.map, out.texture.channels, g.planes, tex_grad);
        if (!all_finite(tex_grad)) fail(Errc::numeric, "non-finite gradient in parameter block 'texture'");
        adam.next_step();
        adam.apply<float>("texture", out.texture.features, tex_grad);
        apply_raster_map(head.map, out.texture, head.planes);
        losses.push_back(loss);
        if (progress) progress(0.1 + 0.8 * double(step + 1) / cfg.texture_steps);
    }
    {
        const Scene sc{{&head.planes, &lib.head_decoder}, {}};
        rep["stage2_final_psnr"] = psnr_bald(render_image(sc, in.camera, rc).image);
    }
    rep["stage2_losses"] = losses;
    rep["init_texture"] = lib.texture_id(out.init_texture);

    // Stage 3: hairstyle from the mask silhouette
    if (cfg.hairstyle) {
        lib.find_hair(*cfg.hairstyle);
        out.hairstyle = *cfg.hairstyle;
    } else {
        const HairQuery q{in.hair_mask, in.camera};
        const HairMatch m = match_hairstyle(lib, std::span(&q, 1), rc);
        out.hairstyle = m.id;
        nlohmann::json d = nlohmann::json::object();
        for (const auto& [id, dist] : m.distances) d[id] = dist;
        rep["stage3_distances"] = d;
    }
    {
        const RenderOutput r = render_instance(lib, out.instance(lib.model), in.camera, rc);
        rep["composite_psnr"] = psnr(r.image, in.image);
    }
    rep["hairstyle"] = out.hairstyle;
    out.report = rep;
    if (progress) progress(1.0);
    return out;
}

/// Same head, different hair reference. The head branch is untouched.
inline HeadInstance swap_hair(const HeadLibrary& lib, const HeadInstance& head, std::string_view hairstyle) {
    lib.find_hair(hairstyle);
    HeadInstance out = head;
    out.hairstyle = std::string(hairstyle);
    return out;
}

// ---------------------------------------------------------------------------
// Animation.

struct AnimationFrame {
    std::vector<double> activations;
    Camera camera;
};

inline std::vector<AnimationFrame> parse_animation_stream(const nlohmann::json& j, const HeadLibrary& lib,
                                                          std::optional<Intrinsics> size_override = {}) {
    if (!j.is_array()) fail(Errc::parse, "animation stream must be a JSON array of frames");
    std::vector<AnimationFrame> frames;
    const std::size_t want = std::size_t(lib.model.expressions) - 1;
    for (std::size_t f = 0; f < j.size(); ++f) {
        const auto& fr = j[f];
        if (!fr.is_object() || !fr.contains("activations") || !fr["activations"].is_array())
            fail(Errc::parse, "frame {}: missing activations array", f);
        AnimationFrame af;
        try {
            af.activations = fr["activations"].get<std::vector<double>>();
        } catch (const nlohmann::json::exception&) {
            fail(Errc::parse, "frame {}: activations must be numbers", f);
        }
        if (af.activations.size() != want)
            fail(Errc::dimension_mismatch, "frame {}: {} activations, model expects {}", f, af.activations.size(), want);
        for (double a : af.activations)
            if (!(a >= 0.0 && a <= 1.0)) fail(Errc::parse, "frame {}: activation {} outside [0,1]", f, a);
        if (fr.contains("camera_id")) {
            if (!fr["camera_id"].is_number_integer()) fail(Errc::parse, "frame {}: camera_id must be an integer", f);
            const auto id = fr["camera_id"].get<long long>();
            if (id < 0 || id >= static_cast<long long>(lib.cameras.size()))
                fail(Errc::not_found, "frame {}: unknown camera id {}", f, id);
            af.camera = lib.cameras[std::size_t(id)];
        } else if (fr.contains("camera")) {
            try {
                af.camera = camera_from_json(fr["camera"]);
            } catch (const nlohmann::json::exception& e) {
                fail(Errc::parse, "frame {}: bad camera: {}", f, e.what());
            }
        } else {
            fail(Errc::parse, "frame {}: needs camera_id or camera", f);
        }
        if (size_override) {
            const Intrinsics& k = af.camera.intrinsics;
            af.camera.intrinsics = k.resized(size_override->width, size_override->height);
        }
        frames.push_back(std::move(af));
    }
    return frames;
}

/// Per frame: blend from activations, re-condition the head on the moved mesh, composite hair, render.
inline std::vector<Image> animate(const HeadLibrary& lib, const ShapeCode& s, const NeuralTexture& texture,
                                  std::string_view hairstyle, std::span<const AnimationFrame> frames,
                                  const RenderConfig& cfg) {
    const HairEntry* hair = lib.find_hair(hairstyle);
    std::vector<Image> out;
    out.reserve(frames.size());
    for (const auto& f : frames) {
        if (f.activations.size() + 1 != std::size_t(lib.model.expressions))
            fail(Errc::dimension_mismatch, "{} activations, model expects {}", f.activations.size(),
                 lib.model.expressions - 1);
        const BlendCode b = blend_from_activations(f.activations);
        const ConditionedField head = condition_field(lib.model, s, b, texture, lib.raster);
        Scene sc{{&head.planes, &lib.head_decoder}, {}};
        if (hair) sc.hair = FieldRef{&hair->planes, &hair->decoder};
        out.push_back(render_image(sc, f.camera, cfg).image);
    }
    return out;
}

// ---------------------------------------------------------------------------
// FittedHead bundle: directory with s.json, texture.bin, hairstyle and report.

inline void save_fitted_head(const FittedHead& f, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(Errc::io, "cannot create '{}': {}", dir.string(), ec.message());
    save_texture(f.texture, dir / "texture.bin");
    std::vector<double> s(f.s.values.data(), f.s.values.data() + f.s.values.size());
    const nlohmann::json j{{"s", s}, {"hairstyle", f.hairstyle}, {"init_texture", f.init_texture}, {"report", f.report}};
    write_file(dir / "fitted.json", j.dump(2));
}

inline FittedHead load_fitted_head(const std::filesystem::path& dir) {
    FittedHead f;
    const auto j = read_json(dir / "fitted.json");
    try {
        const auto s = j.at("s").get<std::vector<double>>();
        f.s.values = Eigen::Map<const Eigen::VectorXd>(s.data(), Eigen::Index(s.size()));
        f.hairstyle = j.at("hairstyle").get<std::string>();
        f.init_texture = j.value("init_texture", std::size_t(0));
        f.report = j.value("report", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "{}: {}", (dir / "fitted.json").string(), e.what());
    }
    f.texture = load_texture(dir / "texture.bin");
    return f;
}

} // namespace head360
