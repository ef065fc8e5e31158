#pragma once

#include "head360/camera.hpp"
#include "head360/hexplane.hpp"
#include "head360/image.hpp"

#include <optional>

namespace head360 {

struct RenderConfig {
    int samples = 96;
    double near = 1.2, far = 4.2;
    Vec3 background = Vec3::Ones();
    bool jitter = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (samples < 2) fail(Errc::invalid_argument, "samples per ray must be >= 2 (got {})", samples);
        if (!(near < far)) fail(Errc::invalid_argument, "near {} must be < far {}", near, far);
    }
};

/// Head branch plus an optional hair branch composited per sample.
struct Scene {
    FieldRef head;
    std::optional<FieldRef> hair;
};

struct RayOutput {
    Vec3 rgb = Vec3::Zero();
    double alpha = 0;         // 1 - final transmittance
    double hair_weight = 0;   // share of the ray's opacity contributed by the hair branch
    double weight_sum = 0;    // sum_i T_i alpha_i; weight_sum + (1 - alpha) telescopes to 1
};

/// Per-sample values kept from the forward pass for reverse-mode differentiation.
struct SampleRecord {
    Stencil head_stencil, hair_stencil;
    std::array<double, 4> head_logits{}, hair_logits{};
    FieldSample head, hair, mixed;
    double transmittance = 1; // T_i before the segment
    double weight = 0;        // T_i - T_{i+1}
};

struct RayTrace {
    double segment = 0;
    double final_transmittance = 1;
    std::vector<SampleRecord> samples;
    std::vector<double> head_features, hair_features; // samples x C
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline void eval_branch(const FieldRef& f, const Vec3& p, Stencil& st, std::span<double> feat,
                        std::array<double, 4>& logits, FieldSample& s) {
    st = sample_stencil(*f.planes, p);
    gather(*f.planes, st, feat);
    logits = decoder_logits(*f.decoder, feat);
    s.sigma = softplus(logits[0]);
    s.color = Vec3(sigmoid(logits[1]), sigmoid(logits[2]), sigmoid(logits[3]));
}

} // namespace detail

/// Midpoint quadrature of the emission-absorption integral over `samples` equal segments of [near, far].
/// With jitter enabled the sample position within each segment is drawn from a stream keyed by
/// (cfg.seed, ray_key), so results do not depend on evaluation order.
inline RayOutput render_ray(const Scene& scene, const Ray& ray, const RenderConfig& cfg, std::uint64_t ray_key = 0,
                            RayTrace* trace = nullptr) {
    const int n = cfg.samples;
    const double seg = (cfg.far - cfg.near) / n;
    const int ch = scene.head.planes->channels;
    const int ch_hair = scene.hair ? scene.hair->planes->channels : 0;
    std::uint64_t rng = cfg.seed * 0x100000001B3ull ^ (ray_key + 0x632BE59BD9B4E019ull);

    RayTrace local;
    RayTrace& tr = trace ? *trace : local;
    tr.segment = seg;
    tr.samples.resize(n);
    tr.head_features.resize(std::size_t(n) * ch);
    tr.hair_features.resize(std::size_t(n) * ch_hair);

    RayOutput out;
    double T = 1.0;
    double hair_opacity = 0;
    for (int i = 0; i < n; ++i) {
        double offset = 0.5;
        if (cfg.jitter) offset = double(detail::splitmix64(rng) >> 11) * 0x1.0p-53;
        const Vec3 p = ray.origin + (cfg.near + (i + offset) * seg) * ray.direction;
        SampleRecord& s = tr.samples[i];
        detail::eval_branch(scene.head, p, s.head_stencil, std::span(tr.head_features).subspan(std::size_t(i) * ch, ch),
                            s.head_logits, s.head);
        if (scene.hair) {
            detail::eval_branch(*scene.hair, p, s.hair_stencil,
                                std::span(tr.hair_features).subspan(std::size_t(i) * ch_hair, ch_hair), s.hair_logits,
                                s.hair);
            s.mixed = composite_point(s.head, s.hair);
        } else {
            s.hair = FieldSample{};
            s.mixed = s.head;
        }
        const double a = 1.0 - std::exp(-s.mixed.sigma * seg);
        const double T_next = T * (1.0 - a);
        s.transmittance = T;
        s.weight = T - T_next;
        out.rgb += s.weight * s.mixed.color;
        out.weight_sum += s.weight;
        if (s.mixed.sigma > 1e-12) hair_opacity += s.weight * s.hair.sigma / s.mixed.sigma;
        T = T_next;
    }
    tr.final_transmittance = T;
    out.rgb += T * cfg.background;
    out.alpha = 1.0 - T;
    out.hair_weight = out.alpha > 1e-12 ? hair_opacity / out.alpha : 0.0;
    return out;
}

/// Gradient sink for one branch. Empty vectors mean the branch is frozen.
struct BranchGradients {
    std::vector<double> planes;
    std::vector<double> decoder;

    bool active() const { return !planes.empty() || !decoder.empty(); }
    void zero() {
        std::fill(planes.begin(), planes.end(), 0.0);
        std::fill(decoder.begin(), decoder.end(), 0.0);
    }
};

namespace detail {

inline void branch_backward(const FieldRef& f, const Stencil& st, std::span<const double> feat,
                            const std::array<double, 4>& logits, const FieldSample& s, double d_sigma,
                            const Vec3& d_color, BranchGradients& g) {
    if (!g.active()) return;
    std::array<double, 4> dl;
    dl[0] = d_sigma * sigmoid(logits[0]);
    for (int k = 0; k < 3; ++k) dl[k + 1] = d_color[k] * s.color[k] * (1.0 - s.color[k]);
    const int C = f.planes->channels;
    const FieldDecoder& dec = *f.decoder;
    if (!g.decoder.empty()) {
        for (int r = 0; r < 4; ++r) {
            if (dl[r] == 0.0) continue;
            double* row = &g.decoder[std::size_t(r) * C];
            for (int c = 0; c < C; ++c) row[c] += dl[r] * feat[c];
            g.decoder[dec.bias_offset() + r] += dl[r];
        }
    }
    if (!g.planes.empty() && st.count > 0) {
        double df[256];
        for (int c = 0; c < C; ++c) {
            double v = 0;
            for (int r = 0; r < 4; ++r) v += dec.weight(r, c) * dl[r];
            df[c] = v;
        }
        scatter(st, C, std::span<const double>(df, std::size_t(C)), g.planes);
    }
}

} // namespace detail

/// Reverse-mode pass for one traced ray given dLoss/drgb and dLoss/dalpha.
inline void render_ray_backward(const Scene& scene, const RayTrace& tr, const RenderConfig& cfg, const Vec3& d_rgb,
                                double d_alpha, BranchGradients& head_grad, BranchGradients* hair_grad) {
    const int n = static_cast<int>(tr.samples.size());
    const double seg = tr.segment;
    const int ch = scene.head.planes->channels;
    const int ch_hair = scene.hair ? scene.hair->planes->channels : 0;
    if (ch > 256 || ch_hair > 256) fail(Errc::invalid_argument, "feature width above 256 is not supported");
    // S holds the color contributed behind the current sample, including the background.
    Vec3 S = tr.final_transmittance * cfg.background;
    const double dT_final = d_alpha * -1.0; // alpha = 1 - T_n
    for (int i = n - 1; i >= 0; --i) {
        const SampleRecord& s = tr.samples[i];
        const double T_next = s.transmittance - s.weight;
        // d rgb / d sigma_i = seg * (T_{i+1} c_i - S_i); d T_n / d sigma_i = -seg * T_n
        const double d_sigma =
            seg * (T_next * d_rgb.dot(s.mixed.color) - d_rgb.dot(S)) - seg * tr.final_transmittance * dT_final;
        const Vec3 d_color = s.weight * d_rgb;
        S += s.weight * s.mixed.color;

        const auto head_feat = std::span<const double>(tr.head_features).subspan(std::size_t(i) * ch, ch);
        if (!scene.hair) {
            detail::branch_backward(scene.head, s.head_stencil, head_feat, s.head_logits, s.head, d_sigma, d_color,
                                    head_grad);
            continue;
        }
        const double sig = s.mixed.sigma;
        double ds_head = d_sigma, ds_hair = d_sigma;
        Vec3 dc_head = Vec3::Zero(), dc_hair = Vec3::Zero();
        if (sig > 1e-12) {
            ds_head += d_color.dot(s.head.color - s.mixed.color) / sig;
            ds_hair += d_color.dot(s.hair.color - s.mixed.color) / sig;
            dc_head = d_color * (s.head.sigma / sig);
            dc_hair = d_color * (s.hair.sigma / sig);
        }
        detail::branch_backward(scene.head, s.head_stencil, head_feat, s.head_logits, s.head, ds_head, dc_head,
                                head_grad);
        if (hair_grad) {
            const auto hair_feat = std::span<const double>(tr.hair_features).subspan(std::size_t(i) * ch_hair, ch_hair);
            detail::branch_backward(*scene.hair, s.hair_stencil, hair_feat, s.hair_logits, s.hair, ds_hair, dc_hair,
                                    *hair_grad);
        }
    }
}

struct RenderOutput {
    Image image;                    // rgb plus alpha
    std::vector<float> hair_weight; // per pixel
};

/// Pixel-center key used for jitter streams so that a pixel renders identically in any traversal.
inline std::uint64_t pixel_key(int x, int y, int width) { return std::uint64_t(y) * std::uint64_t(width) + std::uint64_t(x); }

inline RenderOutput render_image(const Scene& scene, const Camera& camera, const RenderConfig& cfg) {
    cfg.validate();
    const int w = camera.width(), h = camera.height();
    RenderOutput out{Image(w, h), std::vector<float>(std::size_t(w) * h)};
    out.image.alpha.resize(std::size_t(w) * h);
    RayTrace trace;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Ray ray = camera.generate_ray({x + 0.5, y + 0.5}, cfg.near, cfg.far);
            const RayOutput r = render_ray(scene, ray, cfg, pixel_key(x, y, w), &trace);
            const std::size_t p = std::size_t(y) * w + x;
            out.image.set_pixel(x, y, r.rgb);
            out.image.alpha[p] = static_cast<float>(r.alpha);
            out.hair_weight[p] = static_cast<float>(r.hair_weight);
        }
    out.image.clamp01();
    return out;
}

} // namespace head360
