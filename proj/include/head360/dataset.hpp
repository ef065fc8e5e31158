#pragma once

#include "head360/bilinear.hpp"
#include "head360/camera.hpp"
#include "head360/raster.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <random>

namespace head360 {

/// Procedural stand-in dataset parameters.
struct DatasetSpec {
    std::uint64_t seed = 0;
    int identities = 8;
    int expressions = 6; // includes the neutral base at index 0
    int hairstyles = 4;  // style 0 is bald
    int yaw_count = 24;
    std::vector<double> pitch_angles{-15.0, 0.0, 15.0};
    int image_size = 64;
    int subdivision = 4;
    double fov_deg = 30.0;
    double radius = 2.7;

    void validate() const {
        if (identities < 1 || expressions < 1 || hairstyles < 1 || yaw_count < 1 || pitch_angles.empty())
            fail(Errc::invalid_argument, "dataset counts must all be >= 1");
        if (image_size < 8 || image_size > 2048) fail(Errc::invalid_argument, "image size {} out of range", image_size);
        if (subdivision < 1 || subdivision > 6) fail(Errc::invalid_argument, "subdivision {} out of range", subdivision);
    }
    std::size_t camera_count() const { return std::size_t(yaw_count) * pitch_angles.size(); }
    std::size_t image_count() const { return std::size_t(identities) * expressions * camera_count(); }
    Intrinsics intrinsics() const { return Intrinsics::from_fov(fov_deg, image_size, image_size); }
    CameraRig rig() const { return build_rig(yaw_count, pitch_angles, radius, intrinsics()); }
    int hairstyle_of(int identity) const { return identity % hairstyles; }
};

inline nlohmann::json to_json(const DatasetSpec& s) {
    return {{"seed", s.seed},           {"identities", s.identities}, {"expressions", s.expressions},
            {"hairstyles", s.hairstyles}, {"yaw_count", s.yaw_count},   {"pitch_angles", s.pitch_angles},
            {"image_size", s.image_size}, {"subdivision", s.subdivision}, {"fov_deg", s.fov_deg},
            {"radius", s.radius}};
}

inline DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
    DatasetSpec s;
    try {
        s.seed = j.value("seed", s.seed);
        s.identities = j.value("identities", s.identities);
        s.expressions = j.value("expressions", s.expressions);
        s.hairstyles = j.value("hairstyles", s.hairstyles);
        s.yaw_count = j.value("yaw_count", s.yaw_count);
        s.pitch_angles = j.value("pitch_angles", s.pitch_angles);
        s.image_size = j.value("image_size", s.image_size);
        s.subdivision = j.value("subdivision", s.subdivision);
        s.fov_deg = j.value("fov_deg", s.fov_deg);
        s.radius = j.value("radius", s.radius);
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "bad dataset spec: {}", e.what());
    }
    s.validate();
    return s;
}

inline std::string hairstyle_name(int style) { return style == 0 ? "bald" : fmt::format("s{}", style); }

inline int hairstyle_index(std::string_view name) {
    if (name == "bald") return 0;
    if (name.size() >= 2 && name[0] == 's') {
        int v = 0;
        auto [p, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), v);
        if (ec == std::errc() && p == name.data() + name.size() && v > 0) return v;
    }
    fail(Errc::not_found, "unknown hairstyle id '{}'", name);
}

// ---------------------------------------------------------------------------
// Procedural heads.

namespace detail {

/// Compactly supported smooth bump: (1 - (dist/radius)^2)^2 inside the radius, exactly zero outside.
inline double compact_bump(const Vec3& d, const Vec3& center, double radius) {
    const double r = (d - center).norm() / radius;
    if (r >= 1.0) return 0.0;
    const double q = 1.0 - r * r;
    return q * q;
}

struct ExpressionBasis {
    std::vector<Vec3> centers;
    double radius;
    Vec3 direction;    // displacement direction; zero means radial
    double amplitude;  // signed, radial when direction is zero
};

inline ExpressionBasis expression_basis(int j) {
    // j >= 1; five abstract localized motions cycle, later cycles shift slightly downward
    const int kind = (j - 1) % 5;
    const double shift = 0.04 * ((j - 1) / 5);
    auto n = [](double x, double y, double z) { return Vec3(x, y, z).normalized(); };
    switch (kind) {
    case 0: // jaw open
        return {{n(0, -0.62 - shift, 0.78)}, 0.45, Vec3(0, -1, 0.15).normalized(), 0.11};
    case 1: // smile
        return {{n(0.36, -0.28 - shift, 0.89), n(-0.36, -0.28 - shift, 0.89)}, 0.22, Vec3::Zero(), 0.035};
    case 2: // brow raise
        return {{n(0.3, 0.3 - shift, 0.9), n(-0.3, 0.3 - shift, 0.9)}, 0.22, Vec3(0, 1, 0), 0.045};
    case 3: // eye close
        return {{n(0.3, 0.12 - shift, 0.95), n(-0.3, 0.12 - shift, 0.95)}, 0.14, Vec3::Zero(), -0.03};
    default: // cheek puff
        return {{n(0.58, -0.16 - shift, 0.8), n(-0.58, -0.16 - shift, 0.8)}, 0.28, Vec3::Zero(), 0.06};
    }
}

} // namespace detail

/// One identity: E meshes sharing the icosphere topology (index 0 is neutral) plus albedo colors.
struct IdentityMeshes {
    std::vector<TriMesh> expressions;
    std::vector<std::vector<int>> supports; // vertex support of each expression displacement (empty for 0)
};

inline IdentityMeshes generate_identity(std::uint64_t seed, const DatasetSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    const TriMesh sphere = make_icosphere(spec.subdivision);

    // superellipsoid base with identity-specific proportions
    const Vec3 axes(0.60 * (1 + 0.07 * U(rng)), 0.74 * (1 + 0.05 * U(rng)), 0.68 * (1 + 0.06 * U(rng)));
    const double expo = 2.4 + 0.3 * U(rng);
    struct Bump {
        Vec3 c;
        double radius, amp;
    };
    std::vector<Bump> bumps;
    for (int k = 0; k < 6; ++k) {
        Vec3 c(U(rng), U(rng), U(rng));
        if (c.norm() < 1e-3) c = Vec3::UnitX();
        bumps.push_back({c.normalized(), 0.7 + 0.3 * U(rng), 0.035 * U(rng)});
    }
    const double nose = 0.09 * (1 + 0.25 * U(rng));
    const double chin = 0.04 * (1 + 0.3 * U(rng));

    TriMesh base;
    base.faces = sphere.faces;
    base.vertices.resize(sphere.vertices.size());
    for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
        const Vec3& d = sphere.vertices[v];
        const double s = std::pow(std::abs(d.x() / axes.x()), expo) + std::pow(std::abs(d.y() / axes.y()), expo) +
                         std::pow(std::abs(d.z() / axes.z()), expo);
        double r = std::pow(s, -1.0 / expo);
        for (const auto& b : bumps) r += b.amp * detail::compact_bump(d, b.c, b.radius);
        r += nose * detail::compact_bump(d, Vec3(0, -0.05, 1).normalized(), 0.2);
        r += chin * detail::compact_bump(d, Vec3(0, -0.75, 0.66).normalized(), 0.3);
        base.vertices[v] = r * d;
    }

    // albedo: seeded skin tone with darker features and a soft blotch field
    const double skin_r = 0.78 + 0.15 * (0.5 + 0.5 * U(rng));
    const Vec3 skin(skin_r, skin_r * (0.68 + 0.1 * (0.5 + 0.5 * U(rng))), skin_r * (0.52 + 0.1 * (0.5 + 0.5 * U(rng))));
    const Vec3 lips(0.72, 0.3, 0.32), eyes(0.12, 0.1, 0.1), brows(0.28, 0.18, 0.1);
    const Vec3 blotch_c = Vec3(U(rng), U(rng), U(rng)).normalized();
    base.colors.resize(base.vertices.size());
    for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
        const Vec3& d = sphere.vertices[v];
        Vec3 c = skin * (1.0 - 0.12 * detail::compact_bump(d, blotch_c, 0.8));
        auto mix = [&](const Vec3& target, double w) { c = (1 - w) * c + w * target; };
        mix(lips, detail::compact_bump(d, Vec3(0, -0.38, 0.92).normalized(), 0.2));
        for (double sx : {-1.0, 1.0}) {
            mix(eyes, detail::compact_bump(d, Vec3(0.3 * sx, 0.12, 0.95).normalized(), 0.13));
            mix(brows, detail::compact_bump(d, Vec3(0.3 * sx, 0.29, 0.91).normalized(), 0.12));
        }
        base.colors[v] = c.cwiseMax(0.0).cwiseMin(1.0);
    }

    IdentityMeshes out;
    out.expressions.push_back(base);
    out.supports.emplace_back();
    for (int j = 1; j < spec.expressions; ++j) {
        const auto basis = detail::expression_basis(j);
        TriMesh m = base;
        std::vector<int> support;
        for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
            const Vec3& d = sphere.vertices[v];
            double k = 0;
            for (const auto& c : basis.centers) k += detail::compact_bump(d, c, basis.radius);
            if (k == 0.0) continue;
            support.push_back(static_cast<int>(v));
            const Vec3 dir = basis.direction.isZero() ? d : basis.direction;
            m.vertices[v] += basis.amplitude * k * dir;
        }
        out.expressions.push_back(std::move(m));
        out.supports.push_back(std::move(support));
    }
    return out;
}

struct HairstyleParams {
    double front_latitude; // cap covers d_y >= front_latitude - back_extent * max(0, -d_z)
    double back_extent;
    double thickness;
    Vec3 color;

    double min_latitude() const { return front_latitude - back_extent; }
};

inline HairstyleParams hairstyle_params(int style) {
    switch ((style - 1) % 3) {
    case 0: return {0.62, 0.25, 0.05, Vec3(0.25, 0.15, 0.08)};
    case 1: return {0.58, 0.8, 0.08, Vec3(0.07, 0.06, 0.06)};
    default: return {0.62, 1.35, 0.1, Vec3(0.78, 0.62, 0.3)};
    }
}

/// Hair cap over the scalp of `base` (a neutral head on the icosphere topology). Style 0 is bald (empty).
inline TriMesh generate_hairstyle(int style, const TriMesh& base, std::uint64_t seed = 0) {
    TriMesh hair;
    if (style <= 0) return hair;
    HairstyleParams p = hairstyle_params(style);
    if (style > 3) {
        // further styles jitter the three archetypes
        std::mt19937_64 rng(seed * 7919 + style);
        std::uniform_real_distribution<double> U(-1.0, 1.0);
        p.back_extent *= 1 + 0.3 * U(rng);
        p.thickness *= 1 + 0.2 * U(rng);
    }
    const std::size_t n = base.vertices.size();
    std::vector<int> remap(n, -1);
    std::mt19937_64 rng(seed ^ (0xA5A5ull * style));
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    for (std::size_t v = 0; v < n; ++v) {
        const Vec3 d = base.vertices[v].normalized();
        if (d.y() < p.front_latitude - p.back_extent * std::max(0.0, -d.z())) continue;
        remap[v] = static_cast<int>(hair.vertices.size());
        hair.vertices.push_back(base.vertices[v] + p.thickness * d);
        hair.colors.push_back((p.color * (1.0 + 0.08 * U(rng))).cwiseMax(0.0).cwiseMin(1.0));
    }
    for (const auto& f : base.faces) {
        if (remap[f[0]] < 0 || remap[f[1]] < 0 || remap[f[2]] < 0) continue;
        hair.faces.push_back({remap[f[0]], remap[f[1]], remap[f[2]]});
    }
    return hair;
}

/// Default landmark set: vertices on the frontal face region, spread by farthest-point sampling.
inline std::vector<int> default_landmarks(const TriMesh& sphere_topology_mesh, int count) {
    std::vector<int> candidates;
    for (std::size_t v = 0; v < sphere_topology_mesh.vertices.size(); ++v) {
        const Vec3 d = sphere_topology_mesh.vertices[v].normalized();
        if (d.z() > 0.5 && d.y() > -0.8 && d.y() < 0.45) candidates.push_back(static_cast<int>(v));
    }
    if (candidates.empty()) fail(Errc::invalid_argument, "no landmark candidates on the frontal region");
    std::vector<int> chosen;
    std::vector<double> dist(candidates.size(), std::numeric_limits<double>::infinity());
    std::size_t next = 0;
    double best_z = -2;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        const double z = sphere_topology_mesh.vertices[candidates[c]].normalized().z();
        if (z > best_z) {
            best_z = z;
            next = c;
        }
    }
    while (static_cast<int>(chosen.size()) < count && chosen.size() < candidates.size()) {
        chosen.push_back(candidates[next]);
        const Vec3 pv = sphere_topology_mesh.vertices[candidates[next]];
        double far = -1;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            dist[c] = std::min(dist[c], (sphere_topology_mesh.vertices[candidates[c]] - pv).norm());
            if (dist[c] > far) {
                far = dist[c];
                next = c;
            }
        }
    }
    return chosen;
}

// ---------------------------------------------------------------------------
// On-disk dataset.

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        fail(Errc::io, "sha256 digest failed");
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", md[i]);
    return hex;
}

inline std::string sha256_file(const std::filesystem::path& p) {
    const auto b = read_file(p);
    return sha256_hex(std::string_view(b.data(), b.size()));
}

struct IdentityRecord {
    int id = 0;
    int hairstyle = 0;
    std::uint64_t shape_seed = 0;
};

struct ImageRecord {
    int identity = 0, expression = 0, camera = 0;
    std::string image, bald, mask; // paths relative to the dataset root
};

struct DatasetManifest {
    DatasetSpec spec;
    std::vector<IdentityRecord> identities;
    std::vector<ImageRecord> images;
    std::vector<std::string> meshes; // "meshes/{id}_{expr}.obj", identity-major
    std::vector<std::string> hair_meshes;
    std::map<std::string, std::string> digests; // relative path -> sha256

    std::string mesh_path(int i, int j) const { return meshes.at(std::size_t(i) * spec.expressions + j); }
    const ImageRecord& image(int i, int j, int cam) const {
        return images.at((std::size_t(i) * spec.expressions + j) * spec.camera_count() + cam);
    }
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["spec"] = to_json(m.spec);
    j["identities"] = nlohmann::json::array();
    for (const auto& r : m.identities)
        j["identities"].push_back({{"id", r.id}, {"hairstyle", hairstyle_name(r.hairstyle)}, {"shape_seed", r.shape_seed}});
    j["images"] = nlohmann::json::array();
    for (const auto& r : m.images)
        j["images"].push_back({{"identity", r.identity}, {"expression", r.expression}, {"camera", r.camera},
                               {"image", r.image}, {"bald", r.bald}, {"mask", r.mask}});
    j["meshes"] = m.meshes;
    j["hair_meshes"] = m.hair_meshes;
    j["files"] = m.digests;
    j["counts"] = {{"images", m.images.size()}, {"meshes", m.meshes.size()}};
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.spec = dataset_spec_from_json(j.at("spec"));
        for (const auto& r : j.at("identities"))
            m.identities.push_back({r.at("id").get<int>(), hairstyle_index(r.at("hairstyle").get<std::string>()),
                                    r.at("shape_seed").get<std::uint64_t>()});
        for (const auto& r : j.at("images"))
            m.images.push_back({r.at("identity").get<int>(), r.at("expression").get<int>(), r.at("camera").get<int>(),
                                r.at("image").get<std::string>(), r.at("bald").get<std::string>(),
                                r.at("mask").get<std::string>()});
        m.meshes = j.at("meshes").get<std::vector<std::string>>();
        m.hair_meshes = j.value("hair_meshes", std::vector<std::string>{});
        m.digests = j.at("files").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "bad manifest: {}", e.what());
    }
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
    const auto path = root / "manifest.json";
    if (!std::filesystem::exists(path)) fail(Errc::not_found, "no manifest at '{}'", path.string());
    const auto b = read_file(path);
    try {
        return manifest_from_json(nlohmann::json::parse(b.begin(), b.end()));
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::parse, "{}: {}", path.string(), e.what());
    }
}

/// Every listed file exists and matches its recorded digest. Returns the list of problems.
inline std::vector<std::string> verify_dataset(const std::filesystem::path& root, const DatasetManifest& m) {
    std::vector<std::string> problems;
    for (const auto& [rel, digest] : m.digests) {
        const auto p = root / rel;
        if (!std::filesystem::exists(p)) {
            problems.push_back("missing " + rel);
            continue;
        }
        if (sha256_file(p) != digest) problems.push_back("digest mismatch " + rel);
    }
    return problems;
}

struct GroundTruthViews {
    Image full, bald;
    Mask hair_mask;
};

/// Full (head + hair), bald and hair-mask renders of one posed head from one camera.
inline GroundTruthViews render_ground_truth(const TriMesh& head, const TriMesh& hair, const Camera& cam,
                                            const RasterOptions& opt = {}) {
    Rasterizer full(cam, opt);
    full.draw(head, 0);
    if (!hair.faces.empty()) full.draw(hair, 1);
    Rasterizer bald(cam, opt);
    bald.draw(head, 0);
    return {full.color(), bald.color(), full.tag_mask(1)};
}

/// Writes the full dataset under `root` and returns its manifest (also written as manifest.json).
inline DatasetManifest render_dataset(const DatasetSpec& spec, const std::filesystem::path& root) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"", "images", "bald", "masks", "meshes"}) {
        fs::create_directories(root / sub, ec);
        if (ec) fail(Errc::io, "cannot create '{}': {}", (root / sub).string(), ec.message());
    }
    DatasetManifest man;
    man.spec = spec;
    const CameraRig rig = spec.rig();

    auto record = [&](const std::string& rel, std::string_view bytes) {
        write_file(root / rel, bytes);
        man.digests[rel] = sha256_hex(bytes);
    };

    {
        const std::string cams = cameras_to_json(rig.cameras).dump(2);
        record("cameras.json", cams);
    }
    std::vector<int> landmark_vertices;
    for (int i = 0; i < spec.identities; ++i) {
        const std::uint64_t shape_seed = spec.seed * 1000003ull + std::uint64_t(i) * 7777ull + 17ull;
        const int style = spec.hairstyle_of(i);
        man.identities.push_back({i, style, shape_seed});
        const IdentityMeshes id = generate_identity(shape_seed, spec);
        if (i == 0) landmark_vertices = default_landmarks(make_icosphere(spec.subdivision), 48);
        const TriMesh hair = generate_hairstyle(style, id.expressions[0], shape_seed);
        if (!hair.faces.empty()) {
            const std::string rel = fmt::format("meshes/hair_{}.obj", i);
            save_obj(hair, root / rel);
            man.digests[rel] = sha256_file(root / rel);
            man.hair_meshes.push_back(rel);
        } else {
            man.hair_meshes.push_back("");
        }
        for (int j = 0; j < spec.expressions; ++j) {
            const std::string rel = fmt::format("meshes/{}_{}.obj", i, j);
            save_obj(id.expressions[j], root / rel);
            man.digests[rel] = sha256_file(root / rel);
            man.meshes.push_back(rel);
            for (std::size_t k = 0; k < rig.size(); ++k) {
                const auto gt = render_ground_truth(id.expressions[j], hair, rig.cameras[k]);
                const std::string name = fmt::format("{}_{}_{}.png", i, j, k);
                ImageRecord r{i, j, static_cast<int>(k), "images/" + name, "bald/" + name, "masks/" + name};
                record(r.image, encode_png(gt.full));
                record(r.bald, encode_png(gt.bald));
                record(r.mask, encode_png(gt.hair_mask));
                man.images.push_back(std::move(r));
            }
        }
    }
    record("landmarks.json", nlohmann::json{{"vertices", landmark_vertices}}.dump(2));
    write_file(root / "manifest.json", to_json(man).dump(2));
    return man;
}

inline std::vector<int> load_landmark_vertices(const std::filesystem::path& root) {
    const auto b = read_file(root / "landmarks.json");
    try {
        return nlohmann::json::parse(b.begin(), b.end()).at("vertices").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::parse, "{}: {}", (root / "landmarks.json").string(), e.what());
    }
}

/// Stacks the dataset meshes into a (3N, I, E) tensor in manifest order.
inline VertexTensor build_vertex_tensor(const std::filesystem::path& root) {
    const DatasetManifest m = load_manifest(root);
    const int I = m.spec.identities, E = m.spec.expressions;
    if (m.meshes.size() != std::size_t(I) * E)
        fail(Errc::parse, "manifest lists {} meshes, expected {}", m.meshes.size(), std::size_t(I) * E);
    VertexTensor t;
    for (int i = 0; i < I; ++i)
        for (int j = 0; j < E; ++j) {
            const TriMesh mesh = load_obj(root / m.mesh_path(i, j));
            if (i == 0 && j == 0) t = VertexTensor::zeros(static_cast<int>(mesh.vertex_count()), I, E, mesh.faces);
            if (mesh.faces != t.faces)
                fail(Errc::dimension_mismatch, "mesh {} does not share the dataset topology", m.mesh_path(i, j));
            t.set_mesh(i, j, mesh.vertices);
        }
    return t;
}

} // namespace head360
