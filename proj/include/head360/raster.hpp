#pragma once

#include "head360/camera.hpp"
#include "head360/image.hpp"
#include "head360/mesh.hpp"

#include <limits>

namespace head360 {

/// Visits every pixel whose center (x + 0.5, y + 0.5) lies inside the 2D triangle `p`, passing the
/// screen-space barycentric weights of the center. Pixel centers exactly on an edge are owned by
/// top and left edges only, so triangles sharing an edge never both cover a pixel. Winding is irrelevant.
template <typename Fragment>
void rasterize_triangle_2d(const std::array<Vec2, 3>& p, int width, int height, Fragment&& fragment) {
    std::array<Vec2, 3> v = p;
    auto edge = [](const Vec2& a, const Vec2& b, double px, double py) {
        return (b.x() - a.x()) * (py - a.y()) - (b.y() - a.y()) * (px - a.x());
    };
    double area = edge(v[0], v[1], v[2].x(), v[2].y());
    if (!(std::abs(area) > 0) || !std::isfinite(area)) return;
    if (area < 0) {
        std::swap(v[1], v[2]);
        area = -area;
    }
    // With positive area, edge a->b is "top" when horizontal going right and "left" when going up (y down).
    auto top_left = [](const Vec2& a, const Vec2& b) {
        const double dx = b.x() - a.x(), dy = b.y() - a.y();
        return dy < 0 || (dy == 0 && dx > 0);
    };
    const bool tl0 = top_left(v[1], v[2]), tl1 = top_left(v[2], v[0]), tl2 = top_left(v[0], v[1]);
    const double minx = std::min({v[0].x(), v[1].x(), v[2].x()}), maxx = std::max({v[0].x(), v[1].x(), v[2].x()});
    const double miny = std::min({v[0].y(), v[1].y(), v[2].y()}), maxy = std::max({v[0].y(), v[1].y(), v[2].y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(minx - 0.5))),
              x1 = std::min(width - 1, static_cast<int>(std::ceil(maxx - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(miny - 0.5))),
              y1 = std::min(height - 1, static_cast<int>(std::ceil(maxy - 0.5)));
    const bool swapped = p[1] != v[1];
    for (int y = y0; y <= y1; ++y) {
        const double py = y + 0.5;
        for (int x = x0; x <= x1; ++x) {
            const double px = x + 0.5;
            const double e0 = edge(v[1], v[2], px, py), e1 = edge(v[2], v[0], px, py), e2 = edge(v[0], v[1], px, py);
            if (e0 < 0 || e1 < 0 || e2 < 0) continue;
            if ((e0 == 0 && !tl0) || (e1 == 0 && !tl1) || (e2 == 0 && !tl2)) continue;
            const double l0 = e0 / area, l1 = e1 / area, l2 = e2 / area;
            // weights are reported in the caller's vertex order
            if (swapped)
                fragment(x, y, l0, l2, l1);
            else
                fragment(x, y, l0, l1, l2);
        }
    }
}

struct RasterOptions {
    Vec3 clear_color = Vec3::Ones();
    bool shading = true;
    Vec3 light_dir = Vec3(0.35, 0.55, 0.76).normalized(); // world direction toward the light
    double ambient = 0.3;
};

/// Z-buffered perspective rasterizer with perspective-correct attribute interpolation. Several meshes
/// can be drawn into one framebuffer; each pixel remembers the tag of the mesh that won the depth test.
class Rasterizer {
public:
    Rasterizer(const Camera& camera, const RasterOptions& opt = {})
        : camera_(camera), opt_(opt), color_(camera.width(), camera.height(), opt.clear_color),
          depth_(color_.pixel_count(), std::numeric_limits<double>::infinity()), tag_(color_.pixel_count(), -1),
          face_(color_.pixel_count(), -1) {}

    /// Draws a mesh with vertex colors (or features, when present and `use_features`) under `tag`.
    void draw(const TriMesh& mesh, int tag) {
        mesh.validate();
        const int w = camera_.width(), h = camera_.height();
        const bool feat = mesh.has_features();
        if (feat) {
            if (features_.cols() == 0) features_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(color_.pixel_count()), mesh.feature_channels());
            if (features_.cols() != mesh.feature_channels())
                fail(Errc::dimension_mismatch, "rasterizer: feature width {} vs {}", mesh.feature_channels(), features_.cols());
        }
        const std::vector<Vec3> normals = opt_.shading && mesh.has_colors() ? vertex_normals(mesh) : std::vector<Vec3>{};
        std::vector<Vec3> cam(mesh.vertices.size());
        for (std::size_t i = 0; i < cam.size(); ++i) cam[i] = camera_.to_camera(mesh.vertices[i]);
        const auto& K = camera_.intrinsics;
        const Vec3 cam_center = camera_.center();
        for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
            const Face& tri = mesh.faces[f];
            // triangles crossing the near plane are skipped; scenes keep geometry in front of the rig
            if (cam[tri[0]].z() <= 1e-6 || cam[tri[1]].z() <= 1e-6 || cam[tri[2]].z() <= 1e-6) continue;
            std::array<Vec2, 3> scr;
            std::array<double, 3> inv_z;
            for (int k = 0; k < 3; ++k) {
                const Vec3& c = cam[tri[k]];
                scr[k] = {K.fx * c.x() / c.z() + K.cx, K.fy * c.y() / c.z() + K.cy};
                inv_z[k] = 1.0 / c.z();
            }
            rasterize_triangle_2d(scr, w, h, [&](int x, int y, double l0, double l1, double l2) {
                const double a0 = l0 * inv_z[0], a1 = l1 * inv_z[1], a2 = l2 * inv_z[2];
                const double iz = a0 + a1 + a2;
                const double z = 1.0 / iz;
                const std::size_t pix = std::size_t(y) * w + x;
                if (!(z < depth_[pix])) return;
                depth_[pix] = z;
                tag_[pix] = tag;
                face_[pix] = static_cast<int>(f);
                const double b0 = a0 / iz, b1 = a1 / iz, b2 = a2 / iz;
                if (feat) {
                    features_.row(static_cast<Eigen::Index>(pix)) =
                        b0 * mesh.features.row(tri[0]) + b1 * mesh.features.row(tri[1]) + b2 * mesh.features.row(tri[2]);
                }
                if (mesh.has_colors()) {
                    Vec3 c = b0 * mesh.colors[tri[0]] + b1 * mesh.colors[tri[1]] + b2 * mesh.colors[tri[2]];
                    if (opt_.shading) {
                        Vec3 n = (b0 * normals[tri[0]] + b1 * normals[tri[1]] + b2 * normals[tri[2]]);
                        if (n.norm() > 0) n.normalize();
                        const Vec3 pos = b0 * mesh.vertices[tri[0]] + b1 * mesh.vertices[tri[1]] + b2 * mesh.vertices[tri[2]];
                        if (n.dot(cam_center - pos) < 0) n = -n;
                        c *= opt_.ambient + (1.0 - opt_.ambient) * std::max(0.0, n.dot(opt_.light_dir));
                    }
                    color_.set_pixel(x, y, c);
                }
            });
        }
    }

    const Image& color() const { return color_; }
    const std::vector<double>& depth() const { return depth_; }
    const std::vector<int>& tags() const { return tag_; }
    const std::vector<int>& faces() const { return face_; }
    const Eigen::MatrixXd& features() const { return features_; }

    Mask coverage() const {
        Mask m(color_.width, color_.height);
        for (std::size_t i = 0; i < tag_.size(); ++i) m.data[i] = tag_[i] >= 0 ? 1 : 0;
        return m;
    }
    Mask tag_mask(int tag) const {
        Mask m(color_.width, color_.height);
        for (std::size_t i = 0; i < tag_.size(); ++i) m.data[i] = tag_[i] == tag ? 1 : 0;
        return m;
    }

private:
    Camera camera_;
    RasterOptions opt_;
    Image color_;
    std::vector<double> depth_;
    std::vector<int> tag_, face_;
    Eigen::MatrixXd features_;
};

struct RasterResult {
    Image color;
    std::vector<double> depth; // camera-space z, +inf where uncovered
    Mask coverage;
    Eigen::MatrixXd features;  // pixel_count x C when the mesh carries features
};

/// Single-mesh convenience wrapper around Rasterizer.
inline RasterResult rasterize_mesh(const TriMesh& mesh, const Camera& camera, const RasterOptions& opt = {}) {
    Rasterizer r(camera, opt);
    r.draw(mesh, 0);
    return {r.color(), r.depth(), r.coverage(), r.features()};
}

} // namespace head360
