#pragma once

#include "head360/common.hpp"

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <numbers>

namespace head360 {

struct Intrinsics {
    double fx = 0, fy = 0;  // focal lengths in pixels
    double cx = 0, cy = 0;  // principal point in pixels
    int width = 0, height = 0;

    /// Square-pixel intrinsics from a vertical field of view with the principal point at the image center.
    static Intrinsics from_fov(double fov_deg, int width, int height) {
        require(fov_deg > 0 && fov_deg < 180, Errc::invalid_argument, "field of view must be in (0,180)");
        require(width > 0 && height > 0, Errc::invalid_argument, "image size must be positive");
        const double f = 0.5 * height / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
        return {f, f, 0.5 * width, 0.5 * height, width, height};
    }

    /// Same field of view at another resolution.
    Intrinsics resized(int w, int h) const {
        const double sx = static_cast<double>(w) / width, sy = static_cast<double>(h) / height;
        return {fx * sx, fy * sy, cx * sx, cy * sy, w, h};
    }
};

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ(); // unit length
    double near = 0, far = 1;

    Vec3 at(double t) const { return origin + t * direction; }
};

/// Pinhole camera. Extrinsics map world to camera: x_cam = R * x_world + t, with
/// camera +x right, +y down and +z along the optical axis.
struct Camera {
    Intrinsics intrinsics;
    Mat3 R = Mat3::Identity();
    Vec3 t = Vec3::Zero();

    Vec3 center() const { return -R.transpose() * t; }
    Vec3 optical_axis() const { return R.row(2).transpose(); }
    int width() const { return intrinsics.width; }
    int height() const { return intrinsics.height; }

    void validate() const {
        if (!(intrinsics.fx > 0 && intrinsics.fy > 0)) fail(Errc::invalid_argument, "focal length must be positive");
        if (intrinsics.width <= 0 || intrinsics.height <= 0) fail(Errc::invalid_argument, "image size must be positive");
        if ((R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-8 || std::abs(R.determinant() - 1) > 1e-8)
            fail(Errc::invalid_argument, "camera rotation is not a proper rotation");
    }

    /// Camera at `position` looking at `target`. Falls back to +x as up vector
    /// when the view direction is (anti)parallel to `up`.
    static Camera look_at(const Vec3& position, const Vec3& target, const Intrinsics& k,
                          const Vec3& up = Vec3::UnitY()) {
        const Vec3 forward = (target - position).normalized();
        Vec3 right = forward.cross(up);
        if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitX());
        right.normalize();
        const Vec3 down = forward.cross(right);
        Camera cam;
        cam.intrinsics = k;
        cam.R.row(0) = right.transpose();
        cam.R.row(1) = down.transpose();
        cam.R.row(2) = forward.transpose();
        cam.t = -cam.R * position;
        return cam;
    }

    Vec3 to_camera(const Vec3& world) const { return R * world + t; }

    /// Pinhole projection to continuous pixel coordinates. Pixel (i, j) covers [i, i+1) x [j, j+1).
    Vec2 project(const Vec3& world) const {
        const Vec3 p = to_camera(world);
        if (!(p.z() > 1e-9))
            fail(Errc::invalid_argument, "point ({}, {}, {}) is not in front of the camera", world.x(), world.y(),
                 world.z());
        return {intrinsics.fx * p.x() / p.z() + intrinsics.cx, intrinsics.fy * p.y() / p.z() + intrinsics.cy};
    }

    /// Ray through a continuous pixel position; pass (i + 0.5, j + 0.5) for pixel centers.
    Ray generate_ray(const Vec2& pixel, double near, double far) const {
        if (pixel.x() < 0 || pixel.y() < 0 || pixel.x() > intrinsics.width || pixel.y() > intrinsics.height)
            fail(Errc::invalid_argument, "pixel ({}, {}) outside the {}x{} image", pixel.x(), pixel.y(),
                 intrinsics.width, intrinsics.height);
        require(near < far, Errc::invalid_argument, "ray near must be < far");
        const Vec3 d_cam((pixel.x() - intrinsics.cx) / intrinsics.fx, (pixel.y() - intrinsics.cy) / intrinsics.fy, 1.0);
        Ray ray;
        ray.origin = center();
        ray.direction = (R.transpose() * d_cam).normalized();
        ray.near = near;
        ray.far = far;
        return ray;
    }
};

/// Head-centric ring cameras: `yaw_count` evenly spaced yaws per pitch ring, all looking at the origin.
struct CameraRig {
    std::vector<Camera> cameras;
    int yaw_count = 0;
    std::vector<double> pitch_angles; // degrees
    double radius = 0;

    std::size_t size() const { return cameras.size(); }
    const Camera& at(std::size_t i) const {
        if (i >= cameras.size()) fail(Errc::not_found, "camera id {} not in rig of {}", i, cameras.size());
        return cameras[i];
    }
    int index(int pitch_idx, int yaw_idx) const { return pitch_idx * yaw_count + yaw_idx; }
};

/// Position for a rig camera. Yaw 0 sits on +z (facing the head's front) and increases toward +x.
inline Vec3 rig_position(double yaw_deg, double pitch_deg, double radius) {
    const double y = yaw_deg * std::numbers::pi / 180.0, p = pitch_deg * std::numbers::pi / 180.0;
    return radius * Vec3(std::cos(p) * std::sin(y), std::sin(p), std::cos(p) * std::cos(y));
}

inline CameraRig build_rig(int yaw_count, const std::vector<double>& pitch_angles, double radius,
                           const Intrinsics& k) {
    if (yaw_count < 1) fail(Errc::invalid_argument, "yaw_count must be >= 1 (got {})", yaw_count);
    if (!(radius > 0)) fail(Errc::invalid_argument, "rig radius must be positive");
    if (pitch_angles.empty()) fail(Errc::invalid_argument, "rig needs at least one pitch angle");
    CameraRig rig;
    rig.yaw_count = yaw_count;
    rig.pitch_angles = pitch_angles;
    rig.radius = radius;
    for (double pitch : pitch_angles) {
        if (std::abs(pitch) > 90) fail(Errc::invalid_argument, "pitch {} outside [-90, 90]", pitch);
        for (int i = 0; i < yaw_count; ++i) {
            const double yaw = 360.0 * i / yaw_count;
            rig.cameras.push_back(Camera::look_at(rig_position(yaw, pitch, radius), Vec3::Zero(), k));
        }
    }
    return rig;
}

// cameras.json: [{id, width, height, fx, fy, cx, cy, R: [9, row-major], t: [3]}]

inline nlohmann::json cameras_to_json(const std::vector<Camera>& cameras) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const auto& c = cameras[i];
        nlohmann::json j;
        j["id"] = i;
        j["width"] = c.intrinsics.width;
        j["height"] = c.intrinsics.height;
        j["fx"] = c.intrinsics.fx;
        j["fy"] = c.intrinsics.fy;
        j["cx"] = c.intrinsics.cx;
        j["cy"] = c.intrinsics.cy;
        std::vector<double> r(9);
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) r[a * 3 + b] = c.R(a, b);
        j["R"] = r;
        j["t"] = {c.t.x(), c.t.y(), c.t.z()};
        arr.push_back(std::move(j));
    }
    return arr;
}

inline Camera camera_from_json(const nlohmann::json& j) {
    try {
        Camera c;
        c.intrinsics.width = j.at("width").get<int>();
        c.intrinsics.height = j.at("height").get<int>();
        c.intrinsics.fx = j.at("fx").get<double>();
        c.intrinsics.fy = j.at("fy").get<double>();
        c.intrinsics.cx = j.at("cx").get<double>();
        c.intrinsics.cy = j.at("cy").get<double>();
        const auto r = j.at("R").get<std::vector<double>>();
        const auto t = j.at("t").get<std::vector<double>>();
        if (r.size() != 9 || t.size() != 3) fail(Errc::parse, "camera R needs 9 and t needs 3 entries");
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) c.R(a, b) = r[a * 3 + b];
        c.t = Vec3(t[0], t[1], t[2]);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "bad camera record: {}", e.what());
    }
}

inline std::vector<Camera> cameras_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) fail(Errc::parse, "cameras.json must hold an array");
    std::vector<Camera> out;
    for (const auto& j : arr) out.push_back(camera_from_json(j));
    return out;
}

} // namespace head360
