#pragma once

#include "head360/bilinear.hpp"
#include "head360/hexplane.hpp"
#include "head360/raster.hpp"

namespace head360 {

/// Per-vertex feature vectors, row-major N x C.
struct NeuralTexture {
    int vertex_count = 0, channels = 0;
    std::vector<float> features;

    static NeuralTexture zeros(int n, int c) { return {n, c, std::vector<float>(std::size_t(n) * c, 0.0f)}; }
    float* row(int v) { return &features[std::size_t(v) * channels]; }
    const float* row(int v) const { return &features[std::size_t(v) * channels]; }

    Eigen::MatrixXd as_matrix() const {
        Eigen::MatrixXd m(vertex_count, channels);
        for (int v = 0; v < vertex_count; ++v)
            for (int c = 0; c < channels; ++c) m(v, c) = row(v)[c];
        return m;
    }
    void validate() const {
        if (features.size() != std::size_t(vertex_count) * channels)
            fail(Errc::dimension_mismatch, "texture payload has {} entries for {}x{}", features.size(), vertex_count,
                 channels);
        if (!all_finite(features)) fail(Errc::numeric, "texture holds non-finite values");
    }
};

struct TextureCode {
    Eigen::VectorXd values;
};

/// Affine texture generator: features = reshape(G t + bias, (N, C)).
struct TextureGenerator {
    int code_dim = 0, vertex_count = 0, channels = 0;
    std::vector<float> weights; // (N*C) x d_t, row-major
    std::vector<float> bias;    // N*C

    std::size_t output_size() const { return std::size_t(vertex_count) * channels; }
};

inline NeuralTexture generate_texture(const TextureGenerator& gen, const TextureCode& t) {
    if (t.values.size() != gen.code_dim)
        fail(Errc::dimension_mismatch, "texture code has {} entries, generator expects {}", t.values.size(), gen.code_dim);
    NeuralTexture tex = NeuralTexture::zeros(gen.vertex_count, gen.channels);
    const std::size_t n = gen.output_size();
    for (std::size_t o = 0; o < n; ++o) {
        double s = gen.bias[o];
        const float* w = &gen.weights[o * gen.code_dim];
        for (int k = 0; k < gen.code_dim; ++k) s += w[k] * t.values[k];
        tex.features[o] = static_cast<float>(s);
    }
    return tex;
}

/// Generator spanning a set of textures: bias is their mean and G holds the leading principal
/// directions scaled so that each texture's code is its coordinates in that basis.
inline std::pair<TextureGenerator, std::vector<TextureCode>> fit_texture_generator(
    std::span<const NeuralTexture> textures, int code_dim) {
    if (textures.empty()) fail(Errc::invalid_argument, "generator fit needs at least one texture");
    const int n = textures[0].vertex_count, c = textures[0].channels;
    const auto dim = static_cast<Eigen::Index>(std::size_t(n) * c);
    Eigen::MatrixXd X(dim, static_cast<Eigen::Index>(textures.size()));
    for (std::size_t i = 0; i < textures.size(); ++i) {
        if (textures[i].vertex_count != n || textures[i].channels != c)
            fail(Errc::dimension_mismatch, "texture {} has a different shape", i);
        for (Eigen::Index k = 0; k < dim; ++k) X(k, Eigen::Index(i)) = textures[i].features[std::size_t(k)];
    }
    const Eigen::VectorXd mean = X.rowwise().mean();
    const Eigen::MatrixXd centered = X.colwise() - mean;
    code_dim = std::max(1, code_dim);
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(dim, code_dim);
    if (textures.size() > 1) {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU);
        const auto k = std::min<Eigen::Index>(code_dim, svd.matrixU().cols());
        basis.leftCols(k) = svd.matrixU().leftCols(k);
        detail::fix_column_signs(basis);
    }
    TextureGenerator g;
    g.code_dim = code_dim;
    g.vertex_count = n;
    g.channels = c;
    g.weights.resize(std::size_t(dim) * code_dim);
    g.bias.resize(std::size_t(dim));
    for (Eigen::Index k = 0; k < dim; ++k) {
        g.bias[std::size_t(k)] = static_cast<float>(mean[k]);
        for (int q = 0; q < code_dim; ++q) g.weights[std::size_t(k) * code_dim + q] = static_cast<float>(basis(k, q));
    }
    std::vector<TextureCode> codes;
    for (std::size_t i = 0; i < textures.size(); ++i) codes.push_back({basis.transpose() * centered.col(Eigen::Index(i))});
    return {std::move(g), std::move(codes)};
}

// ---------------------------------------------------------------------------
// Orthographic rasterization of a featured mesh onto the six planes.

struct RasterConfig {
    int resolution = 128;
    Bbox bbox;
    double blend_width = 0.1;
};

/// For every texel of the six planes: the three vertices of the winning fragment and their
/// barycentric weights (vertex -1 when uncovered). Geometry-only, so it can be reused across
/// texture updates and transposed for gradients.
struct PlaneRasterMap {
    int resolution = 0;
    std::vector<std::array<int, 3>> vertices;   // 6 * R * R
    std::vector<std::array<float, 3>> weights;  // 6 * R * R

    bool covered(std::size_t texel) const { return vertices[texel][0] >= 0; }
    std::size_t covered_count() const {
        std::size_t n = 0;
        for (const auto& v : vertices) n += v[0] >= 0;
        return n;
    }
};

/// Nearest-surface orthographic raster onto each plane: the +a plane keeps the fragment with the largest
/// a-coordinate, the -a plane the smallest. Fragments whose depth coordinate leaves the bbox are clipped.
inline PlaneRasterMap build_plane_raster_map(std::span<const Vec3> vertices, std::span<const Face> faces,
                                             int resolution, const Bbox& bbox) {
    require(resolution >= 1, Errc::invalid_argument, "plane resolution must be >= 1");
    const int R = resolution;
    const std::size_t per_plane = std::size_t(R) * R;
    PlaneRasterMap map;
    map.resolution = R;
    map.vertices.assign(6 * per_plane, {-1, -1, -1});
    map.weights.assign(6 * per_plane, {0.f, 0.f, 0.f});
    std::vector<double> depth(6 * per_plane, std::numeric_limits<double>::infinity());
    const double scale = R / bbox.extent().x();
    for (int axis = 0; axis < 3; ++axis) {
        const int ua = kPlaneAxes[axis][0], va = kPlaneAxes[axis][1];
        for (const Face& f : faces) {
            std::array<Vec2, 3> uv;
            std::array<double, 3> d;
            for (int k = 0; k < 3; ++k) {
                const Vec3& p = vertices[f[k]];
                uv[k] = {(p[ua] - bbox.min[ua]) * scale, (p[va] - bbox.min[va]) * scale};
                d[k] = p[axis];
            }
            rasterize_triangle_2d(uv, R, R, [&](int u, int v, double l0, double l1, double l2) {
                const double a = l0 * d[0] + l1 * d[1] + l2 * d[2];
                if (a < bbox.min[axis] || a > bbox.max[axis]) return;
                for (int side = 0; side < 2; ++side) {
                    const double key = side == 0 ? -a : a;
                    const std::size_t t = std::size_t(2 * axis + side) * per_plane + std::size_t(v) * R + u;
                    if (!(key < depth[t])) continue;
                    depth[t] = key;
                    map.vertices[t] = {f[0], f[1], f[2]};
                    map.weights[t] = {static_cast<float>(l0), static_cast<float>(l1), static_cast<float>(l2)};
                }
            });
        }
    }
    return map;
}

/// Fills the planes' data from per-vertex features through the raster map.
inline void apply_raster_map(const PlaneRasterMap& map, const NeuralTexture& tex, HexPlanes& planes) {
    const int C = tex.channels;
    if (planes.channels != C || planes.resolution != map.resolution)
        fail(Errc::dimension_mismatch, "plane layout {}x{} does not match map {} / texture {}", planes.resolution,
             planes.channels, map.resolution, C);
    for (std::size_t t = 0; t < map.vertices.size(); ++t) {
        float* out = &planes.data[t * C];
        const auto& vid = map.vertices[t];
        if (vid[0] < 0) {
            std::fill(out, out + C, 0.0f);
            continue;
        }
        const auto& w = map.weights[t];
        const float *f0 = tex.row(vid[0]), *f1 = tex.row(vid[1]), *f2 = tex.row(vid[2]);
        for (int c = 0; c < C; ++c) out[c] = w[0] * f0[c] + w[1] * f1[c] + w[2] * f2[c];
    }
}

/// Adjoint of apply_raster_map: accumulates plane gradients into per-vertex feature gradients.
inline void raster_map_backward(const PlaneRasterMap& map, int channels, std::span<const double> plane_grad,
                                std::span<double> feature_grad) {
    const int C = channels;
    for (std::size_t t = 0; t < map.vertices.size(); ++t) {
        const auto& vid = map.vertices[t];
        if (vid[0] < 0) continue;
        const double* g = &plane_grad[t * C];
        const auto& w = map.weights[t];
        for (int k = 0; k < 3; ++k) {
            double* out = &feature_grad[std::size_t(vid[k]) * C];
            for (int c = 0; c < C; ++c) out[c] += w[k] * g[c];
        }
    }
}

/// Rasterizes a mesh carrying per-vertex features (mesh.features, N x C) into hex-planes.
inline HexPlanes rasterize_to_planes(const TriMesh& mesh, const RasterConfig& cfg) {
    mesh.validate();
    if (!mesh.has_features()) fail(Errc::invalid_argument, "rasterize_to_planes: mesh carries no features");
    const int C = mesh.feature_channels();
    HexPlanes planes = HexPlanes::zeros(cfg.resolution, C, cfg.bbox, cfg.blend_width);
    const auto map = build_plane_raster_map(mesh.vertices, mesh.faces, cfg.resolution, cfg.bbox);
    NeuralTexture tex = NeuralTexture::zeros(static_cast<int>(mesh.vertex_count()), C);
    for (int v = 0; v < tex.vertex_count; ++v)
        for (int c = 0; c < C; ++c) tex.row(v)[c] = static_cast<float>(mesh.features(v, c));
    apply_raster_map(map, tex, planes);
    return planes;
}

/// Head-branch planes for shape s, blend b and a per-vertex texture. The map is returned so callers can
/// push plane gradients back to the texture.
struct ConditionedField {
    HexPlanes planes;
    PlaneRasterMap map;
};

inline ConditionedField condition_field(const BilinearModel& model, const ShapeCode& s, const BlendCode& b,
                                        const NeuralTexture& texture, const RasterConfig& cfg) {
    if (texture.vertex_count != model.vertex_count)
        fail(Errc::dimension_mismatch, "texture has {} vertices, model has {}", texture.vertex_count, model.vertex_count);
    texture.validate();
    const auto verts = synthesize_vertices(model, s, b);
    ConditionedField out;
    out.map = build_plane_raster_map(verts, model.faces, cfg.resolution, cfg.bbox);
    out.planes = HexPlanes::zeros(cfg.resolution, texture.channels, cfg.bbox, cfg.blend_width);
    apply_raster_map(out.map, texture, out.planes);
    return out;
}

// ---------------------------------------------------------------------------
// Files. Texture: "H360TEX\0", u32 N, C, f32 payload.
// Generator: "H360GEN\0", u32 d_t, N, C, f32 weights ((N*C) x d_t row-major), f32 bias.

inline constexpr std::string_view kTextureMagic{"H360TEX\0", 8};
inline constexpr std::string_view kGeneratorMagic{"H360GEN\0", 8};

inline std::vector<char> serialize_texture(const NeuralTexture& t) {
    BinaryWriter w;
    w.bytes(kTextureMagic.data(), kTextureMagic.size());
    w.u32(static_cast<std::uint32_t>(t.vertex_count));
    w.u32(static_cast<std::uint32_t>(t.channels));
    w.array<float>(t.features);
    return w.buffer();
}

inline void save_texture(const NeuralTexture& t, const std::filesystem::path& path) {
    const auto b = serialize_texture(t);
    write_file(path, std::string_view(b.data(), b.size()));
}

inline NeuralTexture parse_texture(std::vector<char> bytes, const std::string& source) {
    BinaryReader r(std::move(bytes), source);
    r.expect_magic(kTextureMagic);
    NeuralTexture t;
    t.vertex_count = static_cast<int>(r.u32());
    t.channels = static_cast<int>(r.u32());
    if (t.vertex_count < 1 || t.channels < 1) fail(Errc::parse, "{}: bad texture dimensions", source);
    t.features = r.array<float>(std::size_t(t.vertex_count) * t.channels);
    r.expect_end();
    return t;
}

inline NeuralTexture load_texture(const std::filesystem::path& path) { return parse_texture(read_file(path), path.string()); }

inline void save_generator(const TextureGenerator& g, const std::filesystem::path& path) {
    BinaryWriter w;
    w.bytes(kGeneratorMagic.data(), kGeneratorMagic.size());
    w.u32(static_cast<std::uint32_t>(g.code_dim));
    w.u32(static_cast<std::uint32_t>(g.vertex_count));
    w.u32(static_cast<std::uint32_t>(g.channels));
    w.array<float>(g.weights);
    w.array<float>(g.bias);
    w.save(path);
}

inline TextureGenerator load_generator(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(kGeneratorMagic);
    TextureGenerator g;
    g.code_dim = static_cast<int>(r.u32());
    g.vertex_count = static_cast<int>(r.u32());
    g.channels = static_cast<int>(r.u32());
    if (g.code_dim < 1 || g.vertex_count < 1 || g.channels < 1) fail(Errc::parse, "{}: bad generator dimensions", path.string());
    g.weights = r.array<float>(g.output_size() * g.code_dim);
    g.bias = r.array<float>(g.output_size());
    r.expect_end();
    return g;
}

} // namespace head360
