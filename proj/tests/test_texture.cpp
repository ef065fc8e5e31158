#include "support.hpp"

using namespace head360;

namespace {

TextureGenerator random_generator(int d, int n, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0, 1);
    TextureGenerator gen{d, n, c, std::vector<float>(std::size_t(n) * c * d), std::vector<float>(std::size_t(n) * c)};
    for (auto& w : gen.weights) w = g(rng);
    for (auto& b : gen.bias) b = g(rng);
    return gen;
}

struct Hit {
    bool covered = false;
    std::array<int, 3> v{};
    std::array<double, 3> w{};
};

// Brute-force orthographic raster for one plane: tests every triangle at the texel center and keeps
// the nearest along the plane's outward axis.
std::vector<Hit> oracle_plane(const std::vector<Vec3>& verts, const std::vector<Face>& faces, int R, const Bbox& box,
                              int axis, int side, int supersample = 1) {
    const int ua = kPlaneAxes[axis][0], va = kPlaneAxes[axis][1];
    const int G = R * supersample;
    const double cell = box.extent().x() / G;
    std::vector<Hit> out(std::size_t(G) * G);
    std::vector<double> best(out.size(), std::numeric_limits<double>::infinity());
    for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
            const Vec2 c(box.min[ua] + (x + 0.5) * cell, box.min[va] + (y + 0.5) * cell);
            for (const Face& f : faces) {
                std::array<Vec2, 3> p;
                for (int k = 0; k < 3; ++k) p[k] = {verts[f[k]][ua], verts[f[k]][va]};
                auto cr = [](const Vec2& a, const Vec2& b, const Vec2& q) {
                    return (b.x() - a.x()) * (q.y() - a.y()) - (b.y() - a.y()) * (q.x() - a.x());
                };
                const double area = cr(p[0], p[1], p[2]);
                if (area == 0) continue;
                const double l0 = cr(p[1], p[2], c) / area, l1 = cr(p[2], p[0], c) / area, l2 = cr(p[0], p[1], c) / area;
                if (l0 < 0 || l1 < 0 || l2 < 0) continue;
                const double depth = l0 * verts[f[0]][axis] + l1 * verts[f[1]][axis] + l2 * verts[f[2]][axis];
                if (depth < box.min[axis] || depth > box.max[axis]) continue;
                const double key = side == 0 ? -depth : depth;
                const std::size_t t = std::size_t(y) * G + x;
                if (key < best[t]) {
                    best[t] = key;
                    out[t] = {true, {f[0], f[1], f[2]}, {l0, l1, l2}};
                }
            }
        }
    return out;
}

} // namespace

TEST(Texture, GeneratorZeroCodeIsBias) {
    const TextureGenerator g = random_generator(3, 5, 2, 1);
    const NeuralTexture t = generate_texture(g, {Eigen::Vector3d::Zero()});
    for (std::size_t i = 0; i < t.features.size(); ++i) EXPECT_EQ(t.features[i], g.bias[i]);
    EXPECT_THROW(generate_texture(g, {Eigen::Vector2d::Zero()}), Error);
}

TEST(Texture, GeneratorAffineIdentity) {
    const TextureGenerator g = random_generator(4, 6, 3, 2);
    const Eigen::Vector4d t1(0.3, -1, 0.2, 0.5), t2(-0.7, 0.1, 1.2, 0);
    const double a = 0.7, b = -1.3;
    const NeuralTexture lhs = generate_texture(g, {a * t1 + b * t2});
    const NeuralTexture x1 = generate_texture(g, {t1}), x2 = generate_texture(g, {t2});
    for (std::size_t i = 0; i < lhs.features.size(); ++i)
        EXPECT_NEAR(lhs.features[i], a * x1.features[i] + b * x2.features[i] - (a + b - 1) * g.bias[i], 1e-4);
}

TEST(Texture, GeneratorHandArithmetic) {
    const TextureGenerator g{2, 1, 1, {1.f, 2.f}, {3.f}};
    EXPECT_EQ(generate_texture(g, {Eigen::Vector2d(1, 1)}).features[0], 6.0f);
}

TEST(Texture, FittedGeneratorReproducesTextures) {
    std::mt19937_64 rng(3);
    std::normal_distribution<float> gn(0, 1);
    std::vector<NeuralTexture> texs(5, NeuralTexture::zeros(30, 4));
    for (auto& t : texs)
        for (auto& f : t.features) f = gn(rng);
    const auto [gen, codes] = fit_texture_generator(texs, 5);
    ASSERT_EQ(codes.size(), 5u);
    for (std::size_t i = 0; i < texs.size(); ++i) {
        const NeuralTexture r = generate_texture(gen, codes[i]);
        for (std::size_t k = 0; k < r.features.size(); ++k) EXPECT_NEAR(r.features[k], texs[i].features[k], 1e-5);
    }
}

TEST(PlaneRaster, FacetParallelToZPlane) {
    TriMesh m;
    m.vertices = {Vec3(-0.8, -0.8, 0.3), Vec3(0.8, -0.8, 0.3), Vec3(-0.8, 0.8, 0.3)};
    m.faces = {{0, 1, 2}};
    m.features = Eigen::MatrixXd::Constant(3, 2, 0.7);
    RasterConfig cfg;
    cfg.resolution = 16;
    const HexPlanes h = rasterize_to_planes(m, cfg);
    const std::size_t per = 16 * 16;
    std::size_t covered_z = 0;
    for (int side = 0; side < 2; ++side)
        for (std::size_t t = 0; t < per; ++t) {
            const float* f = &h.data[(std::size_t(4 + side) * per + t) * 2];
            if (f[0] != 0.0f) {
                EXPECT_NEAR(f[0], 0.7f, 1e-6);
                EXPECT_NEAR(f[1], 0.7f, 1e-6);
                ++covered_z;
            }
        }
    // texel centers strictly inside the triangle, plus those on the hypotenuse that the fill rule may own
    std::size_t strict = 0, on_edge = 0;
    for (int v = 0; v < 16; ++v)
        for (int u = 0; u < 16; ++u) {
            const double x = -1 + (u + 0.5) / 8, y = -1 + (v + 0.5) / 8;
            if (x <= -0.8 || y <= -0.8) continue;
            if (x + y < 0) ++strict;
            else if (x + y == 0) ++on_edge;
        }
    EXPECT_GE(covered_z, 2 * strict);
    EXPECT_LE(covered_z, 2 * (strict + on_edge));
    for (int plane = 0; plane < 4; ++plane)
        for (std::size_t t = 0; t < per * 2; ++t) EXPECT_EQ(h.data[std::size_t(plane) * per * 2 + t], 0.0f);
}

TEST(PlaneRaster, OutsideBboxAllZero) {
    TriMesh m = make_icosphere(1);
    for (auto& v : m.vertices) v = 0.3 * v + Vec3(3, 0, 0);
    m.features = Eigen::MatrixXd::Ones(Eigen::Index(m.vertices.size()), 3);
    const HexPlanes h = rasterize_to_planes(m, RasterConfig{8, Bbox{}, 0.1});
    for (float v : h.data) EXPECT_EQ(v, 0.0f);
}

TEST(PlaneRaster, MatchesBruteForceOracle) {
    const std::vector<Vec3> verts{Vec3(-0.61, -0.43, 0.27), Vec3(0.52, -0.71, -0.18), Vec3(0.13, 0.66, 0.41)};
    const std::vector<Face> faces{{0, 1, 2}};
    const int R = 8;
    const Bbox box;
    const PlaneRasterMap map = build_plane_raster_map(verts, faces, R, box);
    for (int axis = 0; axis < 3; ++axis)
        for (int side = 0; side < 2; ++side) {
            const auto ref = oracle_plane(verts, faces, R, box, axis, side);
            for (std::size_t t = 0; t < ref.size(); ++t) {
                const std::size_t texel = std::size_t(2 * axis + side) * R * R + t;
                ASSERT_EQ(map.covered(texel), ref[t].covered) << "plane " << 2 * axis + side << " texel " << t;
                if (!ref[t].covered) continue;
                for (int k = 0; k < 3; ++k) {
                    EXPECT_EQ(map.vertices[texel][k], ref[t].v[k]);
                    EXPECT_NEAR(map.weights[texel][k], ref[t].w[k], 1e-6);
                }
            }
        }
}

TEST(PlaneRaster, BackwardIsAdjoint) {
    TriMesh m = make_icosphere(2);
    for (auto& v : m.vertices) v *= 0.7;
    const int R = 12, C = 3;
    const PlaneRasterMap map = build_plane_raster_map(m.vertices, m.faces, R, Bbox{});
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0, 1);
    NeuralTexture tex = NeuralTexture::zeros(int(m.vertices.size()), C);
    for (auto& f : tex.features) f = float(g(rng));
    HexPlanes planes = HexPlanes::zeros(R, C);
    apply_raster_map(map, tex, planes);
    std::vector<double> pg(planes.data.size()), tg(tex.features.size(), 0.0);
    for (auto& v : pg) v = g(rng);
    raster_map_backward(map, C, pg, tg);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < pg.size(); ++i) lhs += pg[i] * planes.data[i];
    for (std::size_t i = 0; i < tg.size(); ++i) rhs += tg[i] * tex.features[i];
    EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
}

TEST(PlaneRaster, ConditioningIsGeometryMediated) {
    // expression 2 duplicates the neutral slice, so b = e0 and b = e2 give the same mesh
    const TriMesh base = make_icosphere(2);
    const int N = int(base.vertices.size());
    VertexTensor t = VertexTensor::zeros(N, 3, 3, base.faces);
    for (int i = 0; i < 3; ++i) {
        std::vector<Vec3> v0(N), v1(N);
        for (int n = 0; n < N; ++n) {
            v0[n] = (0.5 + 0.05 * i) * base.vertices[n];
            v1[n] = v0[n] + Vec3(0, -0.05 * std::max(0.0, -base.vertices[n].y()), 0);
        }
        t.set_mesh(i, 0, v0);
        t.set_mesh(i, 1, v1);
        t.set_mesh(i, 2, v0);
    }
    const BilinearModel m = build_bilinear_model(t, 3);
    NeuralTexture tex = NeuralTexture::zeros(N, 2);
    for (std::size_t k = 0; k < tex.features.size(); ++k) tex.features[k] = float(std::sin(0.1 * double(k)));
    RasterConfig cfg;
    cfg.resolution = 24;
    const auto a = condition_field(m, m.identity_code(1), m.unit_blend(0), tex, cfg);
    const auto b = condition_field(m, m.identity_code(1), m.unit_blend(2), tex, cfg);
    const auto a2 = condition_field(m, m.identity_code(1), m.unit_blend(0), tex, cfg);
    EXPECT_EQ(a.planes.data, b.planes.data);
    EXPECT_EQ(a.planes.data, a2.planes.data);
    EXPECT_THROW(condition_field(m, m.identity_code(1), m.unit_blend(0), NeuralTexture::zeros(N + 1, 2), cfg), Error);
}

TEST(PlaneRaster, JawOpenShiftsChinDown) {
    DatasetSpec spec;
    spec.expressions = 2;
    spec.subdivision = 3;
    const IdentityMeshes id = generate_identity(77, spec);
    const auto& support = id.supports[1];
    ASSERT_FALSE(support.empty());
    const int N = int(id.expressions[0].vertices.size());
    NeuralTexture tex = NeuralTexture::zeros(N, 1);
    for (int v : support) tex.features[std::size_t(v)] = 1.0f;

    const int R = 32;
    const Bbox box;
    const double texel = box.extent().x() / R;
    const std::size_t pz = std::size_t(PlaneLabel::pos_z) * R * R;
    // weighted y-centroid of the jaw-support indicator on the +z plane
    auto map_centroid = [&](const TriMesh& mesh) {
        const PlaneRasterMap map = build_plane_raster_map(mesh.vertices, mesh.faces, R, box);
        HexPlanes h = HexPlanes::zeros(R, 1);
        apply_raster_map(map, tex, h);
        double sw = 0, sy = 0;
        for (int v = 0; v < R; ++v)
            for (int u = 0; u < R; ++u) {
                const double w = h.data[pz + std::size_t(v) * R + u];
                sw += w;
                sy += w * (box.min.y() + (v + 0.5) * texel);
            }
        return sy / sw;
    };
    auto oracle_centroid = [&](const TriMesh& mesh) {
        const int S = 4;
        const auto hits = oracle_plane(mesh.vertices, mesh.faces, R, box, 2, 0, S);
        const double cell = texel / S;
        double sw = 0, sy = 0;
        for (int y = 0; y < R * S; ++y)
            for (int x = 0; x < R * S; ++x) {
                const Hit& h = hits[std::size_t(y) * R * S + x];
                if (!h.covered) continue;
                double w = 0;
                for (int k = 0; k < 3; ++k) w += h.w[k] * tex.features[std::size_t(h.v[k])];
                sw += w;
                sy += w * (box.min.y() + (y + 0.5) * cell);
            }
        return sy / sw;
    };
    const double shift = map_centroid(id.expressions[1]) - map_centroid(id.expressions[0]);
    const double expect = oracle_centroid(id.expressions[1]) - oracle_centroid(id.expressions[0]);
    EXPECT_LT(expect, 0.0);
    EXPECT_LT(shift, 0.0);
    EXPECT_NEAR(shift, expect, texel);
}

TEST(Texture, FileRoundTrip) {
    NeuralTexture t = NeuralTexture::zeros(7, 3);
    for (std::size_t k = 0; k < t.features.size(); ++k) t.features[k] = float(k) * 0.37f - 2.0f;
    const auto dir = testsupport::scratch_dir("tex");
    save_texture(t, dir / "t.bin");
    EXPECT_EQ(parse_texture(read_file(dir / "t.bin"), "t.bin").features, t.features);
    const TextureGenerator g = random_generator(2, 7, 3, 4);
    save_generator(g, dir / "g.bin");
    const TextureGenerator g2 = load_generator(dir / "g.bin");
    EXPECT_EQ(g2.weights, g.weights);
    EXPECT_EQ(g2.bias, g.bias);
    std::filesystem::remove_all(dir);
}
