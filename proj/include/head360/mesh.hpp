#pragma once

#include "head360/common.hpp"

#include <charconv>
#include <map>
#include <sstream>

namespace head360 {

/// Triangle mesh with optional per-vertex colors or feature vectors.
struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;
    std::vector<Vec3> colors;    // empty, or one RGB in [0,1] per vertex
    Eigen::MatrixXd features;    // 0 rows, or (vertex count) x C

    std::size_t vertex_count() const { return vertices.size(); }
    bool has_colors() const { return !colors.empty(); }
    bool has_features() const { return features.rows() > 0; }
    int feature_channels() const { return static_cast<int>(features.cols()); }

    void validate() const {
        const auto n = static_cast<int>(vertices.size());
        for (std::size_t f = 0; f < faces.size(); ++f) {
            const auto& t = faces[f];
            for (int k = 0; k < 3; ++k)
                if (t[k] < 0 || t[k] >= n)
                    fail(Errc::invalid_argument, "face {} index {} out of range [0,{})", f, t[k], n);
            if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
                fail(Errc::invalid_argument, "face {} is degenerate (repeated index)", f);
        }
        if (!colors.empty() && colors.size() != vertices.size())
            fail(Errc::dimension_mismatch, "{} colors for {} vertices", colors.size(), n);
        if (features.rows() > 0 && features.rows() != n)
            fail(Errc::dimension_mismatch, "{} feature rows for {} vertices", features.rows(), n);
    }
};

/// Area-weighted per-vertex normals; zero-area neighborhoods fall back to the radial direction.
inline std::vector<Vec3> vertex_normals(const TriMesh& mesh) {
    std::vector<Vec3> normals(mesh.vertices.size(), Vec3::Zero());
    for (const auto& f : mesh.faces) {
        const Vec3& a = mesh.vertices[f[0]];
        const Vec3 n = (mesh.vertices[f[1]] - a).cross(mesh.vertices[f[2]] - a);
        for (int k = 0; k < 3; ++k) normals[f[k]] += n;
    }
    for (std::size_t i = 0; i < normals.size(); ++i) {
        const double len = normals[i].norm();
        if (len > 1e-300)
            normals[i] /= len;
        else if (mesh.vertices[i].norm() > 0)
            normals[i] = mesh.vertices[i].normalized();
    }
    return normals;
}

/// Icosahedron subdivided `level` times and projected to the unit sphere.
/// Vertex count is 10 * 4^level + 2 (level 4 gives 2562).
inline TriMesh make_icosphere(int level) {
    require(level >= 0 && level <= 7, Errc::invalid_argument, "icosphere level must be in [0,7]");
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    TriMesh m;
    m.vertices = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
    for (auto& v : m.vertices) v.normalize();
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
               {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
               {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
    for (int l = 0; l < level; ++l) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const int idx = static_cast<int>(m.vertices.size());
            m.vertices.push_back((m.vertices[a] + m.vertices[b]).normalized());
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<Face> next;
        next.reserve(m.faces.size() * 4);
        for (const auto& f : m.faces) {
            const int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
            next.push_back({f[0], a, c});
            next.push_back({f[1], b, a});
            next.push_back({f[2], c, b});
            next.push_back({a, b, c});
        }
        m.faces = std::move(next);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Wavefront OBJ. Vertex colors use the common "v x y z r g b" extension.

inline void save_obj(const TriMesh& mesh, const std::filesystem::path& path) {
    mesh.validate();
    std::string out;
    out.reserve(mesh.vertices.size() * 64 + mesh.faces.size() * 24);
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        if (mesh.has_colors()) {
            const Vec3& c = mesh.colors[i];
            out += fmt::format("v {:.9g} {:.9g} {:.9g} {:.6g} {:.6g} {:.6g}\n", v.x(), v.y(), v.z(),
                               c.x(), c.y(), c.z());
        } else {
            out += fmt::format("v {:.9g} {:.9g} {:.9g}\n", v.x(), v.y(), v.z());
        }
    }
    for (const auto& f : mesh.faces) out += fmt::format("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1);
    write_file(path, out);
}

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line, const std::string& src) {
    double v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || p != tok.data() + tok.size())
        fail(Errc::parse, "{}:{}: bad number '{}'", src, line, tok);
    return v;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

} // namespace detail

inline TriMesh parse_obj(std::string_view text, const std::string& source = "<obj>") {
    TriMesh mesh;
    bool any_color = false, any_plain = false;
    struct PendingFace {
        std::array<long, 3> idx;
        std::size_t line;
    };
    std::vector<PendingFace> pending;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        const std::size_t end = std::min(text.find('\n', pos), text.size());
        const std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        const auto tok = detail::split_ws(line);
        if (tok.empty() || tok[0][0] == '#') {
            if (end == text.size()) break;
            continue;
        }
        if (tok[0] == "v") {
            if (tok.size() != 4 && tok.size() != 7)
                fail(Errc::parse, "{}:{}: vertex needs 3 or 6 numbers", source, line_no);
            mesh.vertices.emplace_back(detail::parse_double(tok[1], line_no, source),
                                       detail::parse_double(tok[2], line_no, source),
                                       detail::parse_double(tok[3], line_no, source));
            if (tok.size() == 7) {
                any_color = true;
                mesh.colors.emplace_back(detail::parse_double(tok[4], line_no, source),
                                         detail::parse_double(tok[5], line_no, source),
                                         detail::parse_double(tok[6], line_no, source));
            } else {
                any_plain = true;
            }
        } else if (tok[0] == "f") {
            if (tok.size() != 4) fail(Errc::parse, "{}:{}: only triangular faces are supported", source, line_no);
            PendingFace pf{{0, 0, 0}, line_no};
            for (int k = 0; k < 3; ++k) {
                const auto t = tok[k + 1].substr(0, tok[k + 1].find('/'));
                long v = 0;
                auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
                if (ec != std::errc() || p != t.data() + t.size() || v == 0)
                    fail(Errc::parse, "{}:{}: bad face index '{}'", source, line_no, tok[k + 1]);
                pf.idx[k] = v;
            }
            pending.push_back(pf);
        }
        // other statements (vn, vt, o, g, s, usemtl) are ignored
        if (end == text.size()) break;
    }
    if (any_color && any_plain) fail(Errc::parse, "{}: vertex colors present on only some vertices", source);
    const auto n = static_cast<long>(mesh.vertices.size());
    for (const auto& pf : pending) {
        Face f{};
        for (int k = 0; k < 3; ++k) {
            // negative indices are relative to the end of the vertex list
            const long v = pf.idx[k] > 0 ? pf.idx[k] - 1 : n + pf.idx[k];
            if (v < 0 || v >= n)
                fail(Errc::parse, "{}:{}: face index {} out of range (1..{})", source, pf.line, pf.idx[k], n);
            f[k] = static_cast<int>(v);
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            fail(Errc::parse, "{}:{}: degenerate face", source, pf.line);
        mesh.faces.push_back(f);
    }
    return mesh;
}

inline TriMesh load_obj(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_obj(std::string_view(bytes.data(), bytes.size()), path.string());
}

} // namespace head360
