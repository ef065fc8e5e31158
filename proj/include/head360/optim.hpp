#pragma once

#include "head360/hexplane.hpp"

#include <map>
#include <optional>

namespace head360 {

/// Gradients keyed by parameter block name ("texture", "head_decoder", "hair_planes", ...).
struct GradientTape {
    std::map<std::string, std::vector<double>> blocks;

    std::vector<double>& block(const std::string& name, std::size_t size) {
        auto& b = blocks[name];
        if (b.size() != size) b.assign(size, 0.0);
        return b;
    }
    const std::vector<double>* find(const std::string& name) const {
        auto it = blocks.find(name);
        return it == blocks.end() ? nullptr : &it->second;
    }
    void zero() {
        for (auto& [_, b] : blocks) std::fill(b.begin(), b.end(), 0.0);
    }
    void scale(double s) {
        for (auto& [_, b] : blocks)
            for (auto& v : b) v *= s;
    }
    void check_finite() const {
        for (const auto& [name, b] : blocks)
            if (!all_finite(b)) fail(Errc::numeric, "non-finite gradient in parameter block '{}'", name);
    }
};

struct AdamOptions {
    double lr = 0.0025;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Bias-corrected Adam with per-block moment buffers and a shared step counter.
class Adam {
public:
    explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

    const AdamOptions& options() const { return opt_; }
    std::int64_t step_count() const { return step_; }

    /// Advances the shared step counter; call once per optimizer step before apply().
    void next_step() { ++step_; }

    template <typename T>
    void apply(const std::string& name, std::span<T> params, std::span<const double> grad, double lr_scale = 1.0) {
        if (params.size() != grad.size())
            fail(Errc::dimension_mismatch, "adam: block '{}' has {} params but {} gradients", name, params.size(),
                 grad.size());
        if (step_ < 1) fail(Errc::invalid_argument, "adam: next_step() must be called before apply()");
        auto& st = state_[name];
        if (st.m.size() != params.size()) {
            st.m.assign(params.size(), 0.0);
            st.v.assign(params.size(), 0.0);
        }
        const double b1 = opt_.beta1, b2 = opt_.beta2;
        const double c1 = 1.0 - std::pow(b1, double(step_)), c2 = 1.0 - std::pow(b2, double(step_));
        const double lr = opt_.lr * lr_scale;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grad[i];
            st.m[i] = b1 * st.m[i] + (1 - b1) * g;
            st.v[i] = b2 * st.v[i] + (1 - b2) * g * g;
            const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
            params[i] = static_cast<T>(double(params[i]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
        }
    }

    std::vector<char> serialize() const {
        BinaryWriter w;
        w.bytes("H360ADM\0", 8);
        w.f64(static_cast<double>(step_));
        w.u32(static_cast<std::uint32_t>(state_.size()));
        for (const auto& [name, st] : state_) {
            w.u32(static_cast<std::uint32_t>(name.size()));
            w.bytes(name.data(), name.size());
            w.u32(static_cast<std::uint32_t>(st.m.size()));
            w.array<double>(st.m);
            w.array<double>(st.v);
        }
        return w.buffer();
    }

    void deserialize(std::vector<char> bytes, const std::string& source) {
        BinaryReader r(std::move(bytes), source);
        r.expect_magic(std::string_view("H360ADM\0", 8));
        step_ = static_cast<std::int64_t>(r.f64());
        const auto blocks = r.u32();
        state_.clear();
        for (std::uint32_t b = 0; b < blocks; ++b) {
            std::string name(r.u32(), '\0');
            r.bytes(name.data(), name.size());
            const auto n = r.u32();
            auto& st = state_[name];
            st.m = r.array<double>(n);
            st.v = r.array<double>(n);
        }
        r.expect_end();
    }

private:
    struct BlockState {
        std::vector<double> m, v;
    };
    AdamOptions opt_;
    std::int64_t step_ = 0;
    std::map<std::string, BlockState> state_;
};

// ---------------------------------------------------------------------------
// Density smoothness regularizer: mean |sigma(p) - sigma(p + rho u)| over random point pairs.

struct DensityRegOptions {
    int pairs = 256;
    double perturbation = 0.01;
    std::uint64_t seed = 0;
    std::optional<Vec3> fixed_direction; // test hook; random unit directions otherwise
};

struct PointPair {
    Vec3 p, q;
};

inline std::vector<PointPair> density_reg_pairs(const Bbox& box, const DensityRegOptions& opt) {
    if (opt.pairs < 1) fail(Errc::invalid_argument, "density regularizer needs at least one pair");
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<PointPair> out(opt.pairs);
    for (auto& pp : out) {
        for (int a = 0; a < 3; ++a) pp.p[a] = box.min[a] + uni(rng) * (box.max[a] - box.min[a]);
        Vec3 u;
        if (opt.fixed_direction) {
            u = opt.fixed_direction->normalized();
        } else {
            do {
                u = Vec3(gauss(rng), gauss(rng), gauss(rng));
            } while (u.norm() < 1e-12);
            u.normalize();
        }
        pp.q = pp.p + opt.perturbation * u;
    }
    return out;
}

/// Loss for an arbitrary density function (used by tests with analytic fields).
template <typename DensityFn>
double density_regularizer(DensityFn&& sigma_at, const Bbox& box, const DensityRegOptions& opt) {
    const auto pairs = density_reg_pairs(box, opt);
    double loss = 0;
    for (const auto& pp : pairs) loss += std::abs(sigma_at(pp.p) - sigma_at(pp.q));
    return loss / double(pairs.size());
}

/// Loss for a hex-plane field; `weight` * dLoss/dparams is accumulated into the plane and decoder
/// gradient buffers (either may be empty to skip).
inline double density_regularizer(const FieldRef& field, const DensityRegOptions& opt, double weight,
                                  std::vector<double>& plane_grad, std::vector<double>& decoder_grad) {
    const auto pairs = density_reg_pairs(field.planes->bbox, opt);
    const int C = field.planes->channels;
    std::vector<double> fp(C), fq(C), df(C);
    double loss = 0;
    const double k = 1.0 / double(pairs.size());
    for (const auto& pp : pairs) {
        const Stencil sp = sample_stencil(*field.planes, pp.p), sq = sample_stencil(*field.planes, pp.q);
        gather(*field.planes, sp, fp);
        gather(*field.planes, sq, fq);
        const double lp = decoder_logits(*field.decoder, fp)[0], lq = decoder_logits(*field.decoder, fq)[0];
        const double d = softplus(lp) - softplus(lq);
        loss += std::abs(d) * k;
        if (weight == 0.0 || d == 0.0) continue;
        const double sgn = d > 0 ? 1.0 : -1.0;
        // d|d|/dlp = sgn * sigmoid(lp); d|d|/dlq = -sgn * sigmoid(lq)
        const double gp = weight * k * sgn * sigmoid(lp), gq = -weight * k * sgn * sigmoid(lq);
        if (!decoder_grad.empty()) {
            for (int c = 0; c < C; ++c) decoder_grad[c] += gp * fp[c] + gq * fq[c];
            decoder_grad[field.decoder->bias_offset()] += gp + gq;
        }
        if (!plane_grad.empty()) {
            for (int c = 0; c < C; ++c) df[c] = gp * field.decoder->weight(0, c);
            scatter(sp, C, df, plane_grad);
            for (int c = 0; c < C; ++c) df[c] = gq * field.decoder->weight(0, c);
            scatter(sq, C, df, plane_grad);
        }
    }
    return loss;
}

} // namespace head360
