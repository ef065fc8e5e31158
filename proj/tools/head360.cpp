// head360 command-line entry point.

#include "head360/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>

using namespace head360;
namespace fs = std::filesystem;

namespace {

int exit_code_for(Errc c) {
    switch (c) {
    case Errc::invalid_argument:
    case Errc::dimension_mismatch: return 2;
    default: return 1;
    }
}

std::string default_data_dir() {
    if (const char* env = std::getenv("HEAD360_DATA"); env && *env) return env;
    return "data";
}

std::vector<double> parse_list(const std::string& s, const char* what) {
    std::vector<double> v;
    if (s.empty()) return v;
    std::size_t p = 0;
    while (p <= s.size()) {
        const auto q = s.find(',', p);
        const auto tok = s.substr(p, q == std::string::npos ? std::string::npos : q - p);
        try {
            std::size_t used = 0;
            v.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            fail(Errc::invalid_argument, "--{}: '{}' is not a number", what, tok);
        }
        if (q == std::string::npos) break;
        p = q + 1;
    }
    return v;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
    std::vector<int> out;
    for (double d : parse_list(s, what)) {
        if (d != std::floor(d)) fail(Errc::invalid_argument, "--{}: {} is not an integer", what, d);
        out.push_back(static_cast<int>(d));
    }
    return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string spec_file, out;
    DatasetSpec spec;
    std::string pitches = "-15,0,15";
};

int cmd_gen_data(const GenDataArgs& a) {
    DatasetSpec spec = a.spec;
    if (!a.spec_file.empty()) {
        spec = dataset_spec_from_json(read_json(a.spec_file));
    } else {
        spec.pitch_angles = parse_list(a.pitches, "pitch");
    }
    spec.validate();
    const fs::path out = a.out;
    std::optional<DatasetManifest> previous;
    if (fs::exists(out / "manifest.json")) {
        try {
            previous = load_manifest(out);
        } catch (const Error&) {
        }
    }
    const DatasetManifest man = render_dataset(spec, out);
    fmt::print("identities={} expressions={} images={}\n", spec.identities, spec.expressions, man.images.size());
    if (previous && previous->digests == man.digests) fmt::print("unchanged\n");
    return 0;
}

int cmd_build_model(const std::string& data, int rank, const std::string& out) {
    const VertexTensor t = build_vertex_tensor(data);
    const BilinearModel m = build_bilinear_model(t, rank);
    double err2 = 0, ref2 = 0;
    for (int i = 0; i < t.identities; ++i)
        for (int j = 0; j < t.expressions; ++j) {
            const auto v = synthesize_vertices(m, m.identity_code(i), m.unit_blend(j));
            for (int n = 0; n < t.vertex_count; ++n)
                for (int c = 0; c < 3; ++c) {
                    const double ref = t(std::size_t(3) * n + c, i, j);
                    err2 += (v[n][c] - ref) * (v[n][c] - ref);
                    ref2 += ref * ref;
                }
        }
    const double rel = std::sqrt(err2 / std::max(ref2, 1e-300));
    save_model(m, out);
    fmt::print("rank={} identities={} expressions={} vertices={} recon_err={:.3e}\n", rank, t.identities,
               t.expressions, t.vertex_count, rel);
    if (rel < 1e-6) fmt::print("recon_err<1e-6\n");
    return 0;
}

struct TrainArgs {
    std::string data, out, resume, identities, expressions, views;
    TrainConfig cfg;
    double lr = 0.01;
    bool quiet = false;
};

int cmd_train(TrainArgs a) {
    a.cfg.adam.lr = a.lr;
    a.cfg.identities = parse_int_list(a.identities, "identities");
    a.cfg.expressions = parse_int_list(a.expressions, "expressions");
    a.cfg.train_views = parse_int_list(a.views, "views");
    if (a.cfg.checkpoint_every > 0) a.cfg.checkpoint_dir = a.out;
    std::optional<TrainResume> resume;
    if (!a.resume.empty()) resume = load_training_checkpoint(a.resume);
    auto progress = [&](const TrainProgress& p) {
        if (!a.quiet) fmt::print(stderr, "[{}] step {}/{} loss {:.5f}\n", p.phase, p.step + 1, p.total, p.loss);
    };
    TrainResult r = train_head_library(a.data, a.cfg, progress, resume ? &*resume : nullptr);

    // train-view PSNR per identity on its first training view and expression
    DatasetImages data(a.data, load_manifest(a.data));
    nlohmann::json psnrs = nlohmann::json::object();
    HeadLibrary& lib = r.library;
    const auto views = lib.report["train_views"].get<std::vector<int>>();
    const auto exprs = a.cfg.expressions.empty() ? std::vector<int>{0} : a.cfg.expressions;
    for (std::size_t k = 0; k < lib.textures.size(); ++k) {
        const int i = lib.texture_identities[k];
        const int style = data.manifest().spec.hairstyle_of(i);
        const std::string hs = a.cfg.single_branch ? "bald" : hairstyle_name(style);
        const HeadInstance h = library_instance(lib, k, exprs.front(), hs);
        const int cam = views.front();
        const double head = psnr(render_instance(lib, h, lib.cameras[cam], lib.render, false).image,
                                 a.cfg.single_branch ? data.full(i, exprs.front(), cam) : data.bald(i, exprs.front(), cam));
        const double full = psnr(render_instance(lib, h, lib.cameras[cam], lib.render, true).image,
                                 data.full(i, exprs.front(), cam));
        psnrs[lib.texture_id(k)] = {{"camera", cam}, {"head_psnr", head}, {"full_psnr", full}};
        fmt::print("identity={} camera={} head_psnr={:.2f} full_psnr={:.2f}\n", i, cam, head, full);
    }
    lib.report["train_psnr"] = psnrs;
    save_training_checkpoint(r, a.cfg.head_steps, lib.hair.empty() ? 0 : a.cfg.hair_steps, a.out);
    fmt::print("checkpoint={}\n", a.out);
    return 0;
}

nlohmann::json landmarks_doc(const std::string& path) { return read_json(path); }

struct FitArgs {
    std::string checkpoint, image, mask, landmarks, out, hairstyle;
    int steps = 400, rays = 1024;
    std::uint64_t seed = 0;
    bool poisson = false;
    double lr = 0.01;
};

int cmd_fit(const FitArgs& a) {
    const HeadLibrary lib = load_library(a.checkpoint);
    const auto img = read_file(a.image), mask = read_file(a.mask);
    nlohmann::json doc = landmarks_doc(a.landmarks);
    FitRequest fr = parse_fit_request(lib, std::string_view(img.data(), img.size()),
                                      std::string_view(mask.data(), mask.size()), doc);
    fr.config.texture_steps = a.steps;
    fr.config.rays_per_step = a.rays;
    fr.config.seed = a.seed;
    fr.config.poisson = a.poisson;
    fr.config.texture_lr = a.lr;
    if (!a.hairstyle.empty()) fr.config.hairstyle = a.hairstyle;
    const FittedHead f = fit_single_image(lib, fr.input, fr.config);
    save_fitted_head(f, a.out);
    save_png(render_instance(lib, f.instance(lib.model), fr.input.camera, lib.render).image, fs::path(a.out) / "render.png");
    fmt::print("hairstyle={} init_texture={} stage2_psnr={:.2f} composite_psnr={:.2f}\n", f.hairstyle,
               lib.texture_id(f.init_texture), f.report["stage2_final_psnr"].get<double>(),
               f.report["composite_psnr"].get<double>());
    return 0;
}

struct RenderArgs {
    std::string checkpoint, request, out, texture, hairstyle, activations, s, fitted;
    int camera = -1, size = 0, samples = 0, max_size = 256;
};

nlohmann::json request_from_flags(const RenderArgs& a) {
    nlohmann::json j = a.request.empty() ? nlohmann::json::object() : read_json(a.request);
    if (!a.texture.empty()) j["texture"] = a.texture;
    if (!a.hairstyle.empty()) j["hairstyle"] = a.hairstyle;
    if (!a.activations.empty()) j["activations"] = parse_list(a.activations, "activations");
    if (!a.s.empty()) j["s"] = parse_list(a.s, "s");
    if (a.camera >= 0) j["camera_id"] = a.camera;
    if (a.size > 0) j["size"] = a.size;
    if (a.samples > 0) j["samples"] = a.samples;
    return j;
}

int cmd_render(const RenderArgs& a) {
    const HeadLibrary lib = load_library(a.checkpoint);
    const std::string png = render_request_png(lib, request_from_flags(a), a.max_size);
    write_file(a.out, png);
    fmt::print("wrote {} ({} bytes)\n", a.out, png.size());
    return 0;
}

int cmd_swap_hair(const RenderArgs& a) {
    const HeadLibrary lib = load_library(a.checkpoint);
    nlohmann::json j = request_from_flags(a);
    if (a.hairstyle.empty()) fail(Errc::invalid_argument, "swap-hair needs --hairstyle");
    RenderRequest r;
    if (!a.fitted.empty()) {
        const FittedHead f = load_fitted_head(a.fitted);
        j.erase("texture");
        r = parse_render_request(j, lib, a.max_size);
        r.texture = f.texture;
        if (!j.contains("s")) r.s = f.s;
    } else {
        r = parse_render_request(j, lib, a.max_size);
    }
    HeadInstance h{r.s, blend_from_activations(r.activations), r.texture, "bald"};
    h = swap_hair(lib, h, a.hairstyle);
    RenderConfig cfg = lib.render;
    cfg.samples = r.samples;
    save_png(render_instance(lib, h, r.camera, cfg).image, a.out);
    fmt::print("hairstyle={} wrote {}\n", h.hairstyle, a.out);
    return 0;
}

int cmd_animate(const RenderArgs& a, const std::string& stream) {
    const HeadLibrary lib = load_library(a.checkpoint);
    nlohmann::json j = request_from_flags(a);
    j["frames"] = read_json(stream);
    const std::string zip = animate_request_zip(lib, j, a.max_size);
    const auto files = read_stored_zip(zip);
    if (a.out.size() > 4 && a.out.substr(a.out.size() - 4) == ".zip") {
        write_file(a.out, zip);
    } else {
        fs::create_directories(a.out);
        for (const auto& [name, data] : files) write_file(fs::path(a.out) / name, data);
    }
    fmt::print("frames={} wrote {}\n", files.size(), a.out);
    return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt) {
    std::vector<fs::path> names;
    for (const auto& e : fs::directory_iterator(gt))
        if (e.is_regular_file() && e.path().extension() == ".png") names.push_back(e.path().filename());
    std::sort(names.begin(), names.end());
    if (names.empty()) fail(Errc::invalid_argument, "no PNG files in '{}'", gt);
    fmt::print("file,psnr,ssim\n");
    double ps = 0, ss = 0;
    for (const auto& n : names) {
        const Image a = load_png(fs::path(pred) / n), b = load_png(fs::path(gt) / n);
        const double p = psnr(a, b), s = ssim(a, b);
        ps += p;
        ss += s;
        fmt::print("{},{:.4f},{:.6f}\n", n.string(), p, s);
    }
    fmt::print("mean,{:.4f},{:.6f}\n", ps / names.size(), ss / names.size());
    return 0;
}

int cmd_gradcheck(const GradcheckOptions& o) {
    const GradcheckReport r = run_gradcheck(o);
    for (const auto& [block, e] : r.max_rel_by_block) fmt::print("block={} max_rel_err={:.3e}\n", block, e);
    fmt::print("coordinates={} max_rel_err={:.3e}\n", r.entries.size(), r.max_rel_error);
    return r.max_rel_error < 1e-3 ? 0 : 1;
}

HeadService* g_service = nullptr;

int cmd_serve(const std::string& checkpoint, const std::string& host, int port, ServiceOptions opt) {
    auto lib = std::make_shared<const HeadLibrary>(load_library(checkpoint));
    HeadService svc(lib, opt);
    g_service = &svc;
    std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_service) g_service->stop();
    });
    int bound = port;
    if (port == 0) {
        bound = svc.bind_any_port(host);
        if (bound < 0) fail(Errc::io, "cannot bind {}", host);
    }
    fmt::print("listening on {}:{}\n", host, bound);
    std::fflush(stdout);
    const bool ok = port == 0 ? svc.listen_after_bind() : svc.listen(host, port);
    g_service = nullptr;
    if (!ok) fail(Errc::io, "cannot listen on {}:{}", host, port);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"head360: parametric 360-degree head toolkit"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Render the procedural multi-view head dataset");
    gen->add_option("--spec", gd.spec_file, "Dataset spec JSON (overrides flags)");
    gen->add_option("--out", gd.out, "Output directory")->required();
    gen->add_option("--identities", gd.spec.identities);
    gen->add_option("--expressions", gd.spec.expressions);
    gen->add_option("--hairstyles", gd.spec.hairstyles);
    gen->add_option("--yaw", gd.spec.yaw_count);
    gen->add_option("--pitch", gd.pitches, "Comma-separated pitch angles in degrees");
    gen->add_option("--size", gd.spec.image_size);
    gen->add_option("--subdivision", gd.spec.subdivision);
    gen->add_option("--fov", gd.spec.fov_deg);
    gen->add_option("--radius", gd.spec.radius);
    gen->add_option("--seed", gd.spec.seed);

    std::string bm_data = default_data_dir(), bm_out = "model.bin";
    int bm_rank = 0;
    auto* bm = app.add_subcommand("build-model", "Build the bilinear shape model");
    bm->add_option("--data", bm_data);
    bm->add_option("--rank", bm_rank)->required();
    bm->add_option("--out", bm_out);

    TrainArgs ta;
    ta.data = default_data_dir();
    auto* tr = app.add_subcommand("train", "Train textures, head decoder and hair library");
    tr->add_option("--data", ta.data);
    tr->add_option("--out", ta.out)->required();
    tr->add_option("--resume", ta.resume, "Checkpoint directory to continue from");
    tr->add_option("--head-steps", ta.cfg.head_steps);
    tr->add_option("--hair-steps", ta.cfg.hair_steps);
    tr->add_option("--rays", ta.cfg.rays_per_step);
    tr->add_option("--lr", ta.lr);
    tr->add_option("--seed", ta.cfg.seed);
    tr->add_option("--channels", ta.cfg.channels);
    tr->add_option("--resolution", ta.cfg.raster.resolution);
    tr->add_option("--samples", ta.cfg.render.samples);
    tr->add_option("--near", ta.cfg.render.near);
    tr->add_option("--far", ta.cfg.render.far);
    tr->add_option("--lambda-density", ta.cfg.lambda_density);
    tr->add_option("--rank", ta.cfg.rank);
    tr->add_option("--identities", ta.identities, "Comma-separated identity indices");
    tr->add_option("--expressions", ta.expressions, "Comma-separated expression indices");
    tr->add_option("--views", ta.views, "Comma-separated training camera indices");
    tr->add_option("--checkpoint-every", ta.cfg.checkpoint_every);
    tr->add_flag("--single-branch", ta.cfg.single_branch, "Ablation: one head branch trained on full images");
    tr->add_flag("--quiet", ta.quiet);

    FitArgs fa;
    auto* fit = app.add_subcommand("fit", "Fit a head to one image");
    fit->add_option("--checkpoint", fa.checkpoint)->required();
    fit->add_option("--image", fa.image)->required();
    fit->add_option("--mask", fa.mask)->required();
    fit->add_option("--landmarks", fa.landmarks)->required();
    fit->add_option("--out", fa.out)->required();
    fit->add_option("--steps", fa.steps);
    fit->add_option("--rays", fa.rays);
    fit->add_option("--lr", fa.lr);
    fit->add_option("--seed", fa.seed);
    fit->add_option("--hairstyle", fa.hairstyle, "Skip matching and use this hairstyle");
    fit->add_flag("--poisson", fa.poisson);

    auto add_render_opts = [](CLI::App* c, RenderArgs& r) {
        c->add_option("--checkpoint", r.checkpoint)->required();
        c->add_option("--request", r.request, "Render request JSON");
        c->add_option("--out", r.out)->required();
        c->add_option("--texture", r.texture);
        c->add_option("--hairstyle", r.hairstyle);
        c->add_option("--activations", r.activations, "Comma-separated E-1 activations");
        c->add_option("--s", r.s, "Comma-separated shape code");
        c->add_option("--camera", r.camera);
        c->add_option("--size", r.size);
        c->add_option("--samples", r.samples);
        c->add_option("--max-size", r.max_size);
    };
    RenderArgs ra, sa, aa;
    auto* ren = app.add_subcommand("render", "Render a head to PNG");
    add_render_opts(ren, ra);
    auto* swp = app.add_subcommand("swap-hair", "Render a head with another hairstyle");
    add_render_opts(swp, sa);
    swp->add_option("--fitted", sa.fitted, "Fitted head directory");
    std::string stream;
    auto* ani = app.add_subcommand("animate", "Render an activation stream");
    add_render_opts(ani, aa);
    ani->add_option("--stream", stream)->required();

    std::string ev_pred, ev_gt;
    auto* ev = app.add_subcommand("eval", "PSNR/SSIM table between two image directories");
    ev->add_option("--pred", ev_pred)->required();
    ev->add_option("--gt", ev_gt)->required();

    GradcheckOptions go;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all gradients");
    gc->add_option("--resolution", go.resolution);
    gc->add_option("--channels", go.channels);
    gc->add_option("--rays", go.rays);
    gc->add_option("--samples", go.samples);
    gc->add_option("--seed", go.seed);
    gc->add_option("--coordinates", go.coordinates);

    std::string sv_ckpt, sv_host = "127.0.0.1";
    int sv_port = 8080;
    ServiceOptions sv_opt;
    auto* sv = app.add_subcommand("serve", "HTTP service");
    sv->add_option("--checkpoint", sv_ckpt)->required();
    sv->add_option("--port", sv_port);
    sv->add_option("--host", sv_host);
    sv->add_option("--max-size", sv_opt.max_size);
    sv->add_option("--queue", sv_opt.queue_capacity);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen_data(gd);
        if (*bm) return cmd_build_model(bm_data, bm_rank, bm_out);
        if (*tr) return cmd_train(ta);
        if (*fit) return cmd_fit(fa);
        if (*ren) return cmd_render(ra);
        if (*swp) return cmd_swap_hair(sa);
        if (*ani) return cmd_animate(aa, stream);
        if (*ev) return cmd_eval(ev_pred, ev_gt);
        if (*gc) return cmd_gradcheck(go);
        if (*sv) return cmd_serve(sv_ckpt, sv_host, sv_port, sv_opt);
    } catch (const Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 2;
}
