#include "support.hpp"

using namespace head360;

TEST(Camera, RigLayout) {
    const CameraRig rig = build_rig(24, {-15.0, 0.0, 15.0}, 2.7, Intrinsics::from_fov(30, 64, 64));
    ASSERT_EQ(rig.size(), 72u);
    for (const auto& cam : rig.cameras) {
        EXPECT_NO_THROW(cam.validate());
        const Vec3 to_origin = (-cam.center()).normalized();
        EXPECT_LT((to_origin - cam.optical_axis()).norm(), 1e-6);
        EXPECT_NEAR(cam.center().norm(), 2.7, 1e-9);
    }
    for (int p = 0; p < 3; ++p)
        for (int y = 0; y < 24; ++y) {
            const Vec3 a = rig.at(rig.index(p, y)).center(), b = rig.at(rig.index(p, (y + 1) % 24)).center();
            const double ya = std::atan2(a.x(), a.z()), yb = std::atan2(b.x(), b.z());
            double step = (yb - ya) * 180.0 / std::numbers::pi;
            if (step < 0) step += 360.0;
            EXPECT_NEAR(step, 15.0, 1e-9);
        }
    EXPECT_THROW(rig.at(72), Error);
}

TEST(Camera, PinholeProjection) {
    Camera cam;
    cam.intrinsics = {100, 100, 0, 0, 64, 64};
    const Vec2 p = cam.project(Vec3(1, 0, 2));
    EXPECT_DOUBLE_EQ(p.x(), 50.0);
    EXPECT_DOUBLE_EQ(p.y(), 0.0);
    EXPECT_THROW(cam.project(Vec3(1, 1, 0)), Error);
    EXPECT_THROW(cam.project(Vec3(0, 0, -1)), Error);

    const Camera c2 = Camera::look_at(Vec3(1, 2, 3), Vec3(0.1, 0, 0), Intrinsics::from_fov(40, 80, 60));
    const Vec2 pp = c2.project(Vec3(1, 2, 3) + 2.0 * c2.optical_axis());
    EXPECT_NEAR(pp.x(), 40.0, 1e-9);
    EXPECT_NEAR(pp.y(), 30.0, 1e-9);
}

TEST(Camera, RayInverseConsistency) {
    const Camera cam = Camera::look_at(rig_position(40, 15, 2.7), Vec3::Zero(), Intrinsics::from_fov(30, 64, 48));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int k = 0; k < 100; ++k) {
        const Vec2 px(64 * u(rng), 48 * u(rng));
        const Ray r = cam.generate_ray(px, 1.0, 4.0);
        EXPECT_NEAR(r.direction.norm(), 1.0, 1e-12);
        const Vec2 back = cam.project(r.at(1.0 + 3.0 * u(rng)));
        EXPECT_LT((back - px).norm(), 1e-4);
    }
    const Ray c = cam.generate_ray({32, 24}, 1, 4);
    EXPECT_LT((c.direction - cam.optical_axis()).norm(), 1e-12);
    const Ray n = cam.generate_ray({33, 24}, 1, 4);
    EXPECT_NEAR(std::acos(std::clamp(c.direction.dot(n.direction), -1.0, 1.0)), 1.0 / cam.intrinsics.fx, 1e-6);
    EXPECT_THROW(cam.generate_ray({-1, 3}, 1, 4), Error);
    EXPECT_THROW(cam.generate_ray({1, 3}, 4, 1), Error);
}

TEST(Camera, JsonRoundTrip) {
    const CameraRig rig = build_rig(4, {0.0, 10.0}, 2.5, Intrinsics::from_fov(30, 32, 32));
    const auto back = cameras_from_json(cameras_to_json(rig.cameras));
    ASSERT_EQ(back.size(), rig.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].R, rig.cameras[i].R);
        EXPECT_EQ(back[i].t, rig.cameras[i].t);
        EXPECT_EQ(back[i].intrinsics.fx, rig.cameras[i].intrinsics.fx);
    }
}

namespace {

// Camera at the origin looking down +z with the principal point at (0,0): screen = f * (x, y) / z.
Camera screen_camera(int w, int h, double f = 1.0) {
    Camera cam;
    cam.intrinsics = {f, f, 0, 0, w, h};
    return cam;
}

TriMesh screen_triangle(std::array<Vec2, 3> p, double z, std::array<Vec3, 3> colors) {
    TriMesh m;
    for (int k = 0; k < 3; ++k) {
        m.vertices.emplace_back(p[k].x() * z, p[k].y() * z, z);
        m.colors.push_back(colors[k]);
    }
    m.faces.push_back({0, 1, 2});
    return m;
}

double cross2(const Vec2& a, const Vec2& b, const Vec2& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

} // namespace

TEST(Raster, FullScreenConstantColor) {
    const Vec3 c(0.2, 0.4, 0.6);
    const TriMesh m = screen_triangle({Vec2(-5, -5), Vec2(40, -5), Vec2(-5, 40)}, 2.0, {c, c, c});
    RasterOptions opt;
    opt.shading = false;
    const RasterResult r = rasterize_mesh(m, screen_camera(16, 16), opt);
    EXPECT_EQ(r.coverage.count(), 256u);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) EXPECT_LT((r.color.pixel(x, y) - c).norm(), 1e-6);
}

TEST(Raster, NearerTriangleWins) {
    const Vec3 red(1, 0, 0), blue(0, 0, 1);
    const std::array<Vec2, 3> tri{Vec2(-5, -5), Vec2(40, -5), Vec2(-5, 40)};
    RasterOptions opt;
    opt.shading = false;
    for (int order = 0; order < 2; ++order) {
        Rasterizer r(screen_camera(8, 8), opt);
        const TriMesh near = screen_triangle(tri, 1.0, {red, red, red}), far = screen_triangle(tri, 3.0, {blue, blue, blue});
        if (order == 0) {
            r.draw(near, 0);
            r.draw(far, 1);
        } else {
            r.draw(far, 1);
            r.draw(near, 0);
        }
        EXPECT_EQ(r.tag_mask(0).count(), 64u);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) EXPECT_LT((r.color().pixel(x, y) - red).norm(), 1e-6);
    }
}

TEST(Raster, ScanlineOracle) {
    const std::array<Vec2, 3> p{Vec2(0.3, 0.2), Vec2(3.7, 1.1), Vec2(1.2, 3.9)};
    const std::array<Vec3, 3> col{Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    RasterOptions opt;
    opt.shading = false;
    opt.clear_color = Vec3::Zero();
    const RasterResult r = rasterize_mesh(screen_triangle(p, 2.0, col), screen_camera(4, 4), opt);
    const double area = cross2(p[0], p[1], p[2]);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const Vec2 c(x + 0.5, y + 0.5);
            const double l0 = cross2(p[1], p[2], c) / area, l1 = cross2(p[2], p[0], c) / area, l2 = cross2(p[0], p[1], c) / area;
            const bool inside = l0 > 0 && l1 > 0 && l2 > 0;
            EXPECT_EQ(r.coverage.at(x, y), inside ? 1 : 0) << x << "," << y;
            const Vec3 expect = inside ? Vec3(l0 * col[0] + l1 * col[1] + l2 * col[2]) : Vec3::Zero();
            EXPECT_LT((r.color.pixel(x, y) - expect).norm(), 1e-6) << x << "," << y;
            if (inside) {
                EXPECT_NEAR(r.depth[std::size_t(y) * 4 + x], 2.0, 1e-12);
            }
        }
}

TEST(Raster, SharedEdgeCoveredOnce) {
    // two triangles splitting a square along a diagonal through pixel centers
    int hits[6][6] = {};
    const Vec2 a(0.5, 0.5), b(5.5, 0.5), c(5.5, 5.5), d(0.5, 5.5);
    auto count = [&](int x, int y, double, double, double) { ++hits[y][x]; };
    rasterize_triangle_2d({a, b, c}, 6, 6, count);
    rasterize_triangle_2d({a, c, d}, 6, 6, count);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 6; ++x) EXPECT_LE(hits[y][x], 1) << x << "," << y;
    // interior diagonal pixels belong to exactly one of the two
    for (int k = 1; k < 5; ++k) EXPECT_EQ(hits[k][k], 1);
}

TEST(Raster, EmptyMeshClearImage) {
    RasterOptions opt;
    opt.clear_color = Vec3(0.1, 0.2, 0.3);
    const RasterResult r = rasterize_mesh(TriMesh{}, screen_camera(5, 5), opt);
    EXPECT_EQ(r.coverage.count(), 0u);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x) EXPECT_LT((r.color.pixel(x, y) - opt.clear_color).norm(), 1e-7);
}

TEST(Mesh, ObjRoundTrip) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    TriMesh m = make_icosphere(1);
    for (auto& v : m.vertices) v += 0.1 * Vec3(u(rng), u(rng), u(rng));
    for (std::size_t i = 0; i < m.vertices.size(); ++i) m.colors.emplace_back(0.5 + 0.4 * u(rng), 0.5, 0.2);
    const auto dir = testsupport::scratch_dir("obj");
    save_obj(m, dir / "m.obj");
    const TriMesh r = load_obj(dir / "m.obj");
    ASSERT_EQ(r.vertices.size(), m.vertices.size());
    EXPECT_EQ(r.faces, m.faces);
    for (std::size_t i = 0; i < m.vertices.size(); ++i) {
        EXPECT_LT((r.vertices[i] - m.vertices[i]).cwiseAbs().maxCoeff(), 1e-6);
        EXPECT_LT((r.colors[i] - m.colors[i]).cwiseAbs().maxCoeff(), 1e-6);
    }
    std::filesystem::remove_all(dir);
}

TEST(Mesh, TetrahedronFixture) {
    const TriMesh t = load_obj(std::filesystem::path(HEAD360_FIXTURES) / "tetra.obj");
    EXPECT_EQ(t.vertices.size(), 4u);
    EXPECT_EQ(t.faces.size(), 4u);
    EXPECT_FALSE(t.has_colors());
}

TEST(Mesh, BadFaceIndexNamesLine) {
    const std::string text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 7\n";
    try {
        parse_obj(text, "bad.obj");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::parse);
        EXPECT_NE(std::string(e.what()).find("bad.obj:5"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_obj("v 0 0\n"), Error);
    EXPECT_THROW(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3 1\n"), Error);
    EXPECT_THROW(parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 3\n"), Error);
}

TEST(Mesh, IcosphereCounts) {
    for (int level = 0; level <= 4; ++level) {
        const TriMesh m = make_icosphere(level);
        const std::size_t f = 20u << (2 * level);
        EXPECT_EQ(m.faces.size(), f);
        EXPECT_EQ(m.vertices.size(), f / 2 + 2);
        for (const auto& v : m.vertices) EXPECT_NEAR(v.norm(), 1.0, 1e-12);
    }
}
