#pragma once

#include "head360/common.hpp"

#include <algorithm>
#include <random>

namespace head360 {

/// Plane labels in storage order.
enum class PlaneLabel : int { pos_x = 0, neg_x, pos_y, neg_y, pos_z, neg_z };

inline constexpr std::array<const char*, 6> kPlaneNames{"+x", "-x", "+y", "-y", "+z", "-z"};

/// In-plane coordinates for the planes normal to `axis`: x -> (y, z), y -> (x, z), z -> (x, y).
inline constexpr std::array<std::array<int, 2>, 3> kPlaneAxes{{{1, 2}, {0, 2}, {0, 1}}};

struct Bbox {
    Vec3 min = Vec3::Constant(-1.0);
    Vec3 max = Vec3::Constant(1.0);

    bool contains(const Vec3& p) const {
        return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
    }
    Vec3 center() const { return 0.5 * (min + max); }
    Vec3 extent() const { return max - min; }
};

/// Six axis-aligned R x R feature grids with C channels, stored contiguously:
/// texel (plane, u, v) channel c lives at data[((plane * R + v) * R + u) * C + c].
struct HexPlanes {
    int resolution = 0, channels = 0;
    Bbox bbox;
    double blend_width = 0.1;
    std::vector<float> data;

    static HexPlanes zeros(int resolution, int channels, const Bbox& bbox = {}, double blend_width = 0.1) {
        if (resolution < 1 || channels < 1) fail(Errc::invalid_argument, "hex-planes need R >= 1 and C >= 1");
        HexPlanes h;
        h.resolution = resolution;
        h.channels = channels;
        h.bbox = bbox;
        h.blend_width = blend_width;
        h.data.assign(std::size_t(6) * resolution * resolution * channels, 0.0f);
        h.validate();
        return h;
    }

    std::size_t texels_per_plane() const { return std::size_t(resolution) * resolution; }
    std::size_t texel_index(int plane, int u, int v) const {
        return (std::size_t(plane) * resolution + v) * resolution + u;
    }
    float* texel(int plane, int u, int v) { return &data[texel_index(plane, u, v) * channels]; }
    const float* texel(int plane, int u, int v) const { return &data[texel_index(plane, u, v) * channels]; }

    void validate() const {
        if (data.size() != std::size_t(6) * resolution * resolution * channels)
            fail(Errc::dimension_mismatch, "hex-plane payload has {} entries", data.size());
        const Vec3 ext = bbox.extent();
        if (!(ext.x() > 0 && std::abs(ext.x() - ext.y()) < 1e-12 && std::abs(ext.x() - ext.z()) < 1e-12))
            fail(Errc::invalid_argument, "hex-plane bbox must be a cube");
        if (!(blend_width > 0 && blend_width < 0.5 * ext.x()))
            fail(Errc::invalid_argument, "blend width {} must be in (0, half the bbox extent)", blend_width);
        if (!all_finite(data)) fail(Errc::numeric, "hex-planes hold non-finite values");
    }
};

/// Texel references and weights whose weighted sum gives the feature at one point.
/// At most 2 planes x 4 texels per axis.
struct Stencil {
    int count = 0;
    std::array<std::uint32_t, 24> texel{};
    std::array<double, 24> weight{};

    void add(std::uint32_t t, double w) {
        texel[count] = t;
        weight[count] = w;
        ++count;
    }
};

/// Blend weight of the positive plane on one axis.
inline double half_space_weight(double coord, double center, double blend_width) {
    return std::clamp(0.5 + (coord - center) / (2.0 * blend_width), 0.0, 1.0);
}

/// For each axis a: drop coordinate a, bilinearly sample the +a and -a planes at the remaining
/// coordinates and blend them with w = clamp(0.5 + p_a / (2 delta), 0, 1). Axis results are summed.
/// Points outside the bbox get an empty stencil (zero feature).
inline Stencil sample_stencil(const HexPlanes& h, const Vec3& p) {
    Stencil st;
    if (!h.bbox.contains(p)) return st;
    const int R = h.resolution;
    const Vec3 center = h.bbox.center();
    const double scale = R / h.bbox.extent().x();
    for (int axis = 0; axis < 3; ++axis) {
        const int ua = kPlaneAxes[axis][0], va = kPlaneAxes[axis][1];
        const double gu = (p[ua] - h.bbox.min[ua]) * scale - 0.5, gv = (p[va] - h.bbox.min[va]) * scale - 0.5;
        const double fu0 = std::floor(gu), fv0 = std::floor(gv);
        const double tu = gu - fu0, tv = gv - fv0;
        const int u0 = std::clamp(static_cast<int>(fu0), 0, R - 1), u1 = std::clamp(static_cast<int>(fu0) + 1, 0, R - 1);
        const int v0 = std::clamp(static_cast<int>(fv0), 0, R - 1), v1 = std::clamp(static_cast<int>(fv0) + 1, 0, R - 1);
        const double w_pos = half_space_weight(p[axis], center[axis], h.blend_width);
        for (int side = 0; side < 2; ++side) {
            const double ws = side == 0 ? w_pos : 1.0 - w_pos;
            if (ws == 0.0) continue;
            const int plane = 2 * axis + side;
            st.add(static_cast<std::uint32_t>(h.texel_index(plane, u0, v0)), ws * (1 - tu) * (1 - tv));
            st.add(static_cast<std::uint32_t>(h.texel_index(plane, u1, v0)), ws * tu * (1 - tv));
            st.add(static_cast<std::uint32_t>(h.texel_index(plane, u0, v1)), ws * (1 - tu) * tv);
            st.add(static_cast<std::uint32_t>(h.texel_index(plane, u1, v1)), ws * tu * tv);
        }
    }
    return st;
}

/// Gathers `out` (length C) from the planes through a stencil.
inline void gather(const HexPlanes& h, const Stencil& st, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    const int C = h.channels;
    for (int k = 0; k < st.count; ++k) {
        const float* t = &h.data[std::size_t(st.texel[k]) * C];
        const double w = st.weight[k];
        for (int c = 0; c < C; ++c) out[c] += w * t[c];
    }
}

/// Adjoint of gather: grad[texel] += weight * d_feature.
inline void scatter(const Stencil& st, int channels, std::span<const double> d_feature, std::span<double> grad) {
    for (int k = 0; k < st.count; ++k) {
        double* g = &grad[std::size_t(st.texel[k]) * channels];
        const double w = st.weight[k];
        for (int c = 0; c < channels; ++c) g[c] += w * d_feature[c];
    }
}

inline std::vector<double> sample_features(const HexPlanes& h, const Vec3& p) {
    std::vector<double> f(h.channels);
    gather(h, sample_stencil(h, p), f);
    return f;
}

// ---------------------------------------------------------------------------
// Decoder: logits = W f + bias (W is 4 x C, row 0 density, rows 1..3 color).

inline constexpr double kEmptyDensityBias = -10.0;

struct FieldDecoder {
    int channels = 0;
    std::vector<float> params; // 4*C weights (row-major) followed by 4 biases

    static FieldDecoder make(int channels, double density_bias = kEmptyDensityBias) {
        FieldDecoder d;
        d.channels = channels;
        d.params.assign(std::size_t(4) * channels + 4, 0.0f);
        d.params[std::size_t(4) * channels] = static_cast<float>(density_bias);
        return d;
    }
    /// Canonical initialization: small seeded weights, empty-space density bias, neutral color bias.
    static FieldDecoder random(int channels, std::uint64_t seed, double scale = 0.5) {
        FieldDecoder d = make(channels);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n(0.0, scale / std::sqrt(double(channels)));
        for (int i = 0; i < 4 * channels; ++i) d.params[i] = static_cast<float>(n(rng));
        return d;
    }

    float weight(int row, int c) const { return params[std::size_t(row) * channels + c]; }
    float bias(int row) const { return params[std::size_t(4) * channels + row]; }
    std::size_t bias_offset() const { return std::size_t(4) * channels; }
};

struct FieldSample {
    double sigma = 0;          // density per scene unit
    Vec3 color = Vec3::Zero(); // [0,1]^3
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline std::array<double, 4> decoder_logits(const FieldDecoder& d, std::span<const double> f) {
    if (static_cast<int>(f.size()) != d.channels)
        fail(Errc::dimension_mismatch, "feature has {} channels, decoder expects {}", f.size(), d.channels);
    std::array<double, 4> l{};
    for (int r = 0; r < 4; ++r) {
        double s = d.bias(r);
        const float* w = &d.params[std::size_t(r) * d.channels];
        for (int c = 0; c < d.channels; ++c) s += w[c] * f[c];
        l[r] = s;
    }
    return l;
}

inline FieldSample decode(std::span<const double> feature, const FieldDecoder& d) {
    const auto l = decoder_logits(d, feature);
    return {softplus(l[0]), Vec3(sigmoid(l[1]), sigmoid(l[2]), sigmoid(l[3]))};
}

/// Density-weighted mixture of two co-located samples.
inline FieldSample composite_point(const FieldSample& head, const FieldSample& hair) {
    FieldSample out;
    out.sigma = head.sigma + hair.sigma;
    if (out.sigma > 1e-12) out.color = (head.sigma * head.color + hair.sigma * hair.color) / out.sigma;
    return out;
}

/// Non-owning view of one branch: planes plus decoder.
struct FieldRef {
    const HexPlanes* planes = nullptr;
    const FieldDecoder* decoder = nullptr;

    FieldSample evaluate(const Vec3& p) const {
        std::vector<double> f(planes->channels);
        gather(*planes, sample_stencil(*planes, p), f);
        return decode(f, *decoder);
    }
};

// ---------------------------------------------------------------------------
// Files. Hex-plane checkpoint: "H360HEX\0", u32 R, C, f32 planes in label order, f32 decoder (4C + 4).
// Decoder-only file: "H360DEC\0", u32 C, f32 decoder.

inline constexpr std::string_view kHexMagic{"H360HEX\0", 8};
inline constexpr std::string_view kDecoderMagic{"H360DEC\0", 8};

inline void save_hexplanes(const HexPlanes& h, const FieldDecoder& d, const std::filesystem::path& path) {
    if (d.channels != h.channels) fail(Errc::dimension_mismatch, "decoder width {} vs planes {}", d.channels, h.channels);
    BinaryWriter w;
    w.bytes(kHexMagic.data(), kHexMagic.size());
    w.u32(static_cast<std::uint32_t>(h.resolution));
    w.u32(static_cast<std::uint32_t>(h.channels));
    w.array<float>(h.data);
    w.array<float>(d.params);
    w.save(path);
}

inline std::pair<HexPlanes, FieldDecoder> load_hexplanes(const std::filesystem::path& path, const Bbox& bbox = {},
                                                         double blend_width = 0.1) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(kHexMagic);
    const int R = static_cast<int>(r.u32()), C = static_cast<int>(r.u32());
    if (R < 1 || C < 1 || R > 4096 || C > 1024) fail(Errc::parse, "{}: bad plane dimensions {}x{}", path.string(), R, C);
    HexPlanes h;
    h.resolution = R;
    h.channels = C;
    h.bbox = bbox;
    h.blend_width = blend_width;
    h.data = r.array<float>(std::size_t(6) * R * R * C);
    FieldDecoder d;
    d.channels = C;
    d.params = r.array<float>(std::size_t(4) * C + 4);
    r.expect_end();
    h.validate();
    return {std::move(h), std::move(d)};
}

inline void save_decoder(const FieldDecoder& d, const std::filesystem::path& path) {
    BinaryWriter w;
    w.bytes(kDecoderMagic.data(), kDecoderMagic.size());
    w.u32(static_cast<std::uint32_t>(d.channels));
    w.array<float>(d.params);
    w.save(path);
}

inline FieldDecoder load_decoder(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(kDecoderMagic);
    FieldDecoder d;
    d.channels = static_cast<int>(r.u32());
    if (d.channels < 1 || d.channels > 1024) fail(Errc::parse, "{}: bad decoder width", path.string());
    d.params = r.array<float>(std::size_t(4) * d.channels + 4);
    r.expect_end();
    return d;
}

} // namespace head360
