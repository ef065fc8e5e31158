#pragma once

#include "head360/fitting.hpp"
#include "head360/zip.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <thread>

namespace head360 {

// ---------------------------------------------------------------------------
// Render requests: shared by the CLI and POST /render so both produce identical bytes.

struct RenderRequest {
    ShapeCode s;
    std::vector<double> activations;
    NeuralTexture texture;
    std::string hairstyle = "bald";
    Camera camera;
    int samples = 0;
};

inline std::vector<double> json_numbers(const nlohmann::json& j, const char* what) {
    if (!j.is_array()) fail(Errc::parse, "'{}' must be an array of numbers", what);
    std::vector<double> v;
    for (const auto& x : j) {
        if (!x.is_number()) fail(Errc::parse, "'{}' must be an array of numbers", what);
        v.push_back(x.get<double>());
    }
    return v;
}

/// Fields: texture (id string, or {"code": [...]} through the generator), s (r floats; default the
/// texture identity's code), activations (E-1 floats; default neutral), hairstyle, camera_id or camera,
/// size (square output; default the camera's), samples.
inline RenderRequest parse_render_request(const nlohmann::json& j, const HeadLibrary& lib, int max_size) {
    if (!j.is_object()) fail(Errc::parse, "render request must be a JSON object");
    RenderRequest r;
    std::optional<std::size_t> tex_k;
    const auto tex = j.value("texture", nlohmann::json(lib.textures.empty() ? "" : lib.texture_id(0)));
    if (tex.is_string()) {
        tex_k = lib.texture_index(tex.get<std::string>());
        r.texture = lib.textures[*tex_k];
    } else if (tex.is_object() && tex.contains("code")) {
        const auto code = json_numbers(tex["code"], "texture.code");
        if (int(code.size()) != lib.generator.code_dim)
            fail(Errc::dimension_mismatch, "texture code has {} entries, generator expects {}", code.size(),
                 lib.generator.code_dim);
        r.texture = generate_texture(lib.generator,
                                     {Eigen::Map<const Eigen::VectorXd>(code.data(), Eigen::Index(code.size()))});
    } else {
        fail(Errc::parse, "'texture' must be an id string or {{\"code\": [...]}}");
    }
    if (j.contains("s")) {
        const auto s = json_numbers(j["s"], "s");
        if (int(s.size()) != lib.model.rank)
            fail(Errc::dimension_mismatch, "s has {} entries, model rank is {}", s.size(), lib.model.rank);
        r.s.values = Eigen::Map<const Eigen::VectorXd>(s.data(), Eigen::Index(s.size()));
    } else {
        r.s = tex_k ? lib.identity_shape(*tex_k) : lib.model.mean_code();
    }
    if (j.contains("activations")) {
        r.activations = json_numbers(j["activations"], "activations");
        if (r.activations.size() + 1 != std::size_t(lib.model.expressions))
            fail(Errc::dimension_mismatch, "activations has {} entries, expected {}", r.activations.size(),
                 lib.model.expressions - 1);
        for (double a : r.activations)
            if (!(a >= 0 && a <= 1)) fail(Errc::parse, "activation {} outside [0,1]", a);
    } else {
        r.activations.assign(std::size_t(lib.model.expressions) - 1, 0.0);
    }
    if (j.contains("hairstyle")) {
        if (!j["hairstyle"].is_string()) fail(Errc::parse, "'hairstyle' must be a string");
        r.hairstyle = j["hairstyle"].get<std::string>();
        lib.find_hair(r.hairstyle);
    }
    if (j.contains("camera")) {
        try {
            r.camera = camera_from_json(j["camera"]);
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::parse, "bad camera: {}", e.what());
        }
    } else {
        const auto cid = j.value("camera_id", nlohmann::json(0));
        if (!cid.is_number_integer()) fail(Errc::parse, "'camera_id' must be an integer");
        const auto id = cid.get<long long>();
        if (id < 0 || id >= static_cast<long long>(lib.cameras.size())) fail(Errc::not_found, "unknown camera id {}", id);
        r.camera = lib.cameras[std::size_t(id)];
    }
    if (j.contains("size")) {
        if (!j["size"].is_number_integer()) fail(Errc::parse, "'size' must be an integer");
        const int size = j["size"].get<int>();
        if (size < 1) fail(Errc::parse, "size must be positive");
        r.camera.intrinsics = r.camera.intrinsics.resized(size, size);
    }
    if (r.camera.width() > max_size || r.camera.height() > max_size)
        fail(Errc::dimension_mismatch, "requested size {}x{} exceeds the maximum {}", r.camera.width(),
             r.camera.height(), max_size);
    r.samples = lib.render.samples;
    if (j.contains("samples")) {
        if (!j["samples"].is_number_integer()) fail(Errc::parse, "'samples' must be an integer");
        r.samples = j["samples"].get<int>();
        if (r.samples < 2 || r.samples > 4096) fail(Errc::parse, "samples {} out of range [2, 4096]", r.samples);
    }
    r.camera.validate();
    return r;
}

inline Image render_request_image(const HeadLibrary& lib, const RenderRequest& r) {
    RenderConfig cfg = lib.render;
    cfg.samples = r.samples;
    const HeadInstance h{r.s, blend_from_activations(r.activations), r.texture, r.hairstyle};
    return render_instance(lib, h, r.camera, cfg).image;
}

inline std::string render_request_png(const HeadLibrary& lib, const nlohmann::json& request, int max_size) {
    return encode_png(render_request_image(lib, parse_render_request(request, lib, max_size)));
}

inline nlohmann::json model_summary(const HeadLibrary& lib) {
    std::vector<std::string> tex;
    for (std::size_t k = 0; k < lib.textures.size(); ++k) tex.push_back(lib.texture_id(k));
    const auto& K = lib.cameras.empty() ? Intrinsics{} : lib.cameras.front().intrinsics;
    return {{"r", lib.model.rank},
            {"E", lib.model.expressions},
            {"H", lib.hairstyle_ids().size()},
            {"N", lib.model.vertex_count},
            {"texture_ids", tex},
            {"hairstyle_ids", lib.hairstyle_ids()},
            {"texture_code_dim", lib.generator.code_dim},
            {"rig",
             {{"cameras", lib.cameras.size()},
              {"yaw_count", lib.rig_yaw_count},
              {"pitch_angles", lib.rig_pitches},
              {"radius", lib.rig_radius},
              {"width", K.width},
              {"height", K.height}}}};
}

inline std::string animate_request_zip(const HeadLibrary& lib, const nlohmann::json& j, int max_size) {
    if (!j.is_object()) fail(Errc::parse, "animate request must be a JSON object");
    nlohmann::json base = j;
    base.erase("frames");
    const RenderRequest r = parse_render_request(base, lib, max_size);
    if (!j.contains("frames")) fail(Errc::parse, "animate request needs 'frames'");
    std::optional<Intrinsics> size;
    if (j.contains("size")) size = r.camera.intrinsics;
    const auto frames = parse_animation_stream(j["frames"], lib, size);
    for (const auto& f : frames)
        if (f.camera.width() > max_size || f.camera.height() > max_size)
            fail(Errc::dimension_mismatch, "frame size {}x{} exceeds the maximum {}", f.camera.width(),
                 f.camera.height(), max_size);
    RenderConfig cfg = lib.render;
    cfg.samples = r.samples;
    const auto images = animate(lib, r.s, r.texture, r.hairstyle, frames, cfg);
    ZipWriter z;
    for (std::size_t k = 0; k < images.size(); ++k) z.add(fmt::format("frame_{:04d}.png", k), encode_png(images[k]));
    return z.finish();
}

// ---------------------------------------------------------------------------
// Fit requests: image + mask PNGs and a landmarks document.

struct FitRequest {
    FitInput input;
    FitConfig config;
};

/// landmarks document: {"camera_id": k | "camera": {...}, "landmarks": [{"vertex": v, "pixel": [x, y]}, ...],
/// optional "config": {"texture_steps", "seed", "poisson", "rays_per_step", "hairstyle"}}.
inline FitRequest parse_fit_request(const HeadLibrary& lib, std::string_view image_png, std::string_view mask_png,
                                    const nlohmann::json& doc) {
    FitRequest fr;
    fr.input.image = decode_png_image(image_png);
    fr.input.hair_mask = decode_png_mask(mask_png);
    if (!doc.is_object()) fail(Errc::parse, "landmarks document must be a JSON object");
    if (doc.contains("camera")) {
        try {
            fr.input.camera = camera_from_json(doc["camera"]);
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::parse, "bad camera: {}", e.what());
        }
    } else {
        const auto cid = doc.value("camera_id", nlohmann::json(-1));
        if (!cid.is_number_integer()) fail(Errc::parse, "'camera_id' must be an integer");
        const auto id = cid.get<long long>();
        if (id < 0 || id >= static_cast<long long>(lib.cameras.size())) fail(Errc::not_found, "unknown camera id {}", id);
        fr.input.camera = lib.cameras[std::size_t(id)];
    }
    if (!doc.contains("landmarks") || !doc["landmarks"].is_array()) fail(Errc::parse, "missing 'landmarks' array");
    for (const auto& l : doc["landmarks"]) {
        try {
            const auto px = l.at("pixel").get<std::vector<double>>();
            if (px.size() != 2) fail(Errc::parse, "landmark pixel must have 2 entries");
            fr.input.landmarks.push_back({l.at("vertex").get<int>(), Vec2(px[0], px[1])});
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::parse, "bad landmark: {}", e.what());
        }
    }
    if (fr.input.image.width != fr.input.camera.width() || fr.input.image.height != fr.input.camera.height())
        fail(Errc::dimension_mismatch, "image {}x{} does not match camera {}x{}", fr.input.image.width,
             fr.input.image.height, fr.input.camera.width(), fr.input.camera.height());
    if (fr.input.hair_mask.width != fr.input.image.width || fr.input.hair_mask.height != fr.input.image.height)
        fail(Errc::dimension_mismatch, "mask size does not match image size");
    if (doc.contains("config")) {
        const auto& c = doc["config"];
        try {
            fr.config.texture_steps = c.value("texture_steps", fr.config.texture_steps);
            fr.config.texture_lr = c.value("texture_lr", fr.config.texture_lr);
            fr.config.rays_per_step = c.value("rays_per_step", fr.config.rays_per_step);
            fr.config.seed = c.value("seed", fr.config.seed);
            fr.config.poisson = c.value("poisson", fr.config.poisson);
            if (c.contains("hairstyle")) fr.config.hairstyle = c["hairstyle"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::parse, "bad fit config: {}", e.what());
        }
    }
    fr.config.validate();
    return fr;
}

/// Zip of fitted.json, texture.bin and the composite render at the input camera.
inline std::string fitted_head_bundle(const HeadLibrary& lib, const FittedHead& f, const Camera& cam) {
    std::vector<double> s(f.s.values.data(), f.s.values.data() + f.s.values.size());
    const nlohmann::json j{{"s", s}, {"hairstyle", f.hairstyle}, {"init_texture", f.init_texture}, {"report", f.report}};
    const auto tex = serialize_texture(f.texture);
    ZipWriter z;
    z.add("fitted.json", j.dump(2));
    z.add("texture.bin", std::string_view(tex.data(), tex.size()));
    z.add("render.png", encode_png(render_instance(lib, f.instance(lib.model), cam, lib.render).image));
    return z.finish();
}

// ---------------------------------------------------------------------------
// Jobs.

enum class JobState { queued, running, done, failed };

inline const char* to_string(JobState s) {
    switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    default: return "failed";
    }
}

struct JobRecord {
    std::string id;
    std::string kind = "fit";
    JobState state = JobState::queued;
    double progress = 0;
    std::string result_path;
    std::string result_digest;
    std::string error;
};

inline nlohmann::json to_json(const JobRecord& r) {
    return {{"id", r.id},
            {"kind", r.kind},
            {"state", to_string(r.state)},
            {"progress", r.progress},
            {"result_path", r.result_path},
            {"result_digest", r.result_digest},
            {"error", r.error}};
}

/// 26-character Crockford base32: 48-bit millisecond time then 80 bits from a counter-seeded stream.
inline std::string make_ulid(std::uint64_t millis, std::uint64_t entropy_seed) {
    static constexpr char kAlphabet[] = "0123456789ABCDEFGHJKMNPQRSTVWXYZ";
    std::uint64_t x = entropy_seed;
    const std::uint64_t r1 = detail::splitmix64(x), r2 = detail::splitmix64(x);
    // 128 bits: time(48) | random(80)
    const unsigned __int128 v = (static_cast<unsigned __int128>(millis & 0xFFFFFFFFFFFFull) << 80) |
                                (static_cast<unsigned __int128>(r1 & 0xFFFF) << 64) | r2;
    std::string out(26, '0');
    for (int k = 25; k >= 0; --k) {
        const int shift = 5 * (25 - k);
        out[k] = kAlphabet[shift < 128 ? int((v >> shift) & 0x1F) : 0];
    }
    return out;
}

struct ServiceOptions {
    int max_size = 256;
    std::size_t queue_capacity = 4;
};

class HeadService {
public:
    HeadService(std::shared_ptr<const HeadLibrary> lib, ServiceOptions opt = {})
        : lib_(std::move(lib)), opt_(opt), worker_([this] { run_jobs(); }) {
        install_routes();
    }
    ~HeadService() {
        stop();
        {
            std::lock_guard lk(mu_);
            quit_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }
    HeadService(const HeadService&) = delete;
    HeadService& operator=(const HeadService&) = delete;

    /// Binds and serves on the calling thread until stop().
    bool listen(const std::string& host, int port) { return server_.listen(host, port); }
    int bind_any_port(const std::string& host) { return server_.bind_to_any_port(host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    void wait_until_ready() { server_.wait_until_ready(); }

    /// Atomic swap of the served checkpoint.
    void reload(std::shared_ptr<const HeadLibrary> lib) {
        std::lock_guard lk(mu_);
        lib_ = std::move(lib);
    }

private:
    std::shared_ptr<const HeadLibrary> snapshot() const {
        std::lock_guard lk(mu_);
        return lib_;
    }

    static int status_for(Errc c) {
        switch (c) {
        case Errc::invalid_argument:
        case Errc::parse: return 400;
        case Errc::dimension_mismatch: return 422;
        case Errc::not_found: return 404;
        default: return 500;
        }
    }
    static void send_error(httplib::Response& res, int status, const std::string& msg) {
        res.status = status;
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    }
    template <typename F>
    static void guarded(httplib::Response& res, F&& f) {
        try {
            f();
        } catch (const Error& e) {
            send_error(res, status_for(e.code()), e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    }
    static nlohmann::json parse_body(const httplib::Request& req) {
        try {
            return nlohmann::json::parse(req.body);
        } catch (const nlohmann::json::parse_error& e) {
            fail(Errc::parse, "malformed JSON body: {}", e.what());
        }
    }

    void install_routes() {
        server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
        server_.Get("/model", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { res.set_content(model_summary(*snapshot()).dump(), "application/json"); });
        });
        server_.Post("/render", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { res.set_content(render_request_png(*snapshot(), parse_body(req), opt_.max_size), "image/png"); });
        });
        server_.Post("/animate", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                res.set_content(animate_request_zip(*snapshot(), parse_body(req), opt_.max_size), "application/zip");
            });
        });
        server_.Post("/fit", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { submit_fit(req, res); });
        });
        server_.Get(R"(/jobs/([0-9A-Z]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                std::lock_guard lk(mu_);
                auto it = jobs_.find(req.matches[1]);
                if (it == jobs_.end()) fail(Errc::not_found, "unknown job id '{}'", std::string(req.matches[1]));
                res.set_content(to_json(it->second.record).dump(), "application/json");
            });
        });
        server_.Get(R"(/jobs/([0-9A-Z]+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                std::lock_guard lk(mu_);
                auto it = jobs_.find(req.matches[1]);
                if (it == jobs_.end()) fail(Errc::not_found, "unknown job id '{}'", std::string(req.matches[1]));
                if (it->second.record.state != JobState::done) {
                    send_error(res, 409, fmt::format("job is {}", to_string(it->second.record.state)));
                    return;
                }
                res.set_content(it->second.result, "application/zip");
            });
        });
    }

    void submit_fit(const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data()) fail(Errc::parse, "POST /fit expects multipart/form-data");
        for (const char* f : {"image", "mask", "landmarks"})
            if (!req.has_file(f)) fail(Errc::parse, "missing multipart field '{}'", f);
        const auto lib = snapshot();
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(req.get_file_value("landmarks").content);
        } catch (const nlohmann::json::parse_error& e) {
            fail(Errc::parse, "malformed landmarks JSON: {}", e.what());
        }
        FitRequest fr = parse_fit_request(*lib, req.get_file_value("image").content, req.get_file_value("mask").content, doc);
        std::lock_guard lk(mu_);
        if (queue_.size() >= opt_.queue_capacity) {
            send_error(res, 503, "job queue is full");
            return;
        }
        const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
        Job job;
        job.record.id = make_ulid(std::uint64_t(now), ++job_counter_ ^ (std::uint64_t(now) << 20));
        job.record.result_path = "";
        job.request = std::move(fr);
        job.library = lib;
        const std::string id = job.record.id;
        jobs_.emplace(id, std::move(job));
        queue_.push_back(id);
        cv_.notify_all();
        res.status = 202;
        res.set_content(to_json(jobs_.at(id).record).dump(), "application/json");
    }

    void run_jobs() {
        for (;;) {
            std::string id;
            FitRequest req;
            std::shared_ptr<const HeadLibrary> lib;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [&] { return quit_ || !queue_.empty(); });
                if (quit_) return;
                id = queue_.front();
                queue_.pop_front();
                Job& j = jobs_.at(id);
                j.record.state = JobState::running;
                req = j.request;
                lib = j.library;
            }
            try {
                const FittedHead f = fit_single_image(*lib, req.input, req.config, [&](double p) {
                    std::lock_guard lk(mu_);
                    auto& r = jobs_.at(id).record;
                    r.progress = std::max(r.progress, std::min(p, 0.99));
                });
                std::string bundle = fitted_head_bundle(*lib, f, req.input.camera);
                std::lock_guard lk(mu_);
                Job& j = jobs_.at(id);
                j.result = std::move(bundle);
                j.record.result_digest = sha256_hex(j.result);
                j.record.result_path = "/jobs/" + id + "/result";
                j.record.progress = 1.0;
                j.record.state = JobState::done;
            } catch (const std::exception& e) {
                std::lock_guard lk(mu_);
                Job& j = jobs_.at(id);
                j.record.error = e.what();
                j.record.state = JobState::failed;
            }
        }
    }

    struct Job {
        JobRecord record;
        FitRequest request;
        std::shared_ptr<const HeadLibrary> library;
        std::string result;
    };

    std::shared_ptr<const HeadLibrary> lib_;
    ServiceOptions opt_;
    httplib::Server server_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::string, Job> jobs_;
    std::deque<std::string> queue_;
    std::uint64_t job_counter_ = 0;
    bool quit_ = false;
    std::thread worker_;
};

} // namespace head360
