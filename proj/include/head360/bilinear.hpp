#pragma once

#include "head360/camera.hpp"
#include "head360/mesh.hpp"

#include <Eigen/Dense>

namespace head360 {

/// Identity-expression stack of meshes with shared topology, stored row-major as (3N, I, E):
/// entry (k, i, j) lives at data[(k * I + i) * E + j], where k = 3 * vertex + axis.
struct VertexTensor {
    int vertex_count = 0, identities = 0, expressions = 0;
    std::vector<double> data;
    std::vector<Face> faces;

    std::size_t rows() const { return std::size_t(3) * vertex_count; }
    double operator()(std::size_t k, int i, int j) const {
        return data[(k * identities + i) * expressions + j];
    }
    double& operator()(std::size_t k, int i, int j) { return data[(k * identities + i) * expressions + j]; }

    static VertexTensor zeros(int n, int identities, int expressions, std::vector<Face> faces = {}) {
        VertexTensor t;
        t.vertex_count = n;
        t.identities = identities;
        t.expressions = expressions;
        t.data.assign(std::size_t(3) * n * identities * expressions, 0.0);
        t.faces = std::move(faces);
        return t;
    }

    void set_mesh(int i, int j, const std::vector<Vec3>& vertices) {
        if (static_cast<int>(vertices.size()) != vertex_count)
            fail(Errc::dimension_mismatch, "mesh ({}, {}) has {} vertices, tensor expects {}", i, j, vertices.size(),
                 vertex_count);
        for (int v = 0; v < vertex_count; ++v)
            for (int a = 0; a < 3; ++a) (*this)(std::size_t(3) * v + a, i, j) = vertices[v][a];
    }

    std::vector<Vec3> mesh(int i, int j) const {
        std::vector<Vec3> out(vertex_count);
        for (int v = 0; v < vertex_count; ++v)
            for (int a = 0; a < 3; ++a) out[v][a] = (*this)(std::size_t(3) * v + a, i, j);
        return out;
    }

    void validate(double bound = 1.0) const {
        if (vertex_count <= 0 || identities <= 0 || expressions <= 0)
            fail(Errc::invalid_argument, "vertex tensor dimensions must be positive");
        if (data.size() != rows() * identities * expressions)
            fail(Errc::dimension_mismatch, "vertex tensor payload has {} entries", data.size());
        for (double v : data) {
            if (!std::isfinite(v)) fail(Errc::numeric, "vertex tensor holds a non-finite entry");
            if (std::abs(v) > bound) fail(Errc::invalid_argument, "vertex coordinate {} outside [-{}, {}]", v, bound, bound);
        }
        for (const auto& f : faces)
            for (int k = 0; k < 3; ++k)
                if (f[k] < 0 || f[k] >= vertex_count) fail(Errc::invalid_argument, "face index {} out of range", f[k]);
    }
};

struct ShapeCode {
    Eigen::VectorXd values;
};

struct BlendCode {
    Eigen::VectorXd values;
};

/// Bilinear morphable model: vertices = core x_2 s x_3 b. The core is stored row-major as (3N, r, E),
/// i.e. as a 3N x (r * E) matrix whose columns are indexed by q * E + j.
struct BilinearModel {
    int vertex_count = 0, identities = 0, expressions = 0, rank = 0;
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> core;  // 3N x (r*E)
    Eigen::MatrixXd identity_factor;                                                // I x r
    std::vector<Face> faces;

    ShapeCode identity_code(int i) const {
        if (i < 0 || i >= identities) fail(Errc::not_found, "identity {} not in [0,{})", i, identities);
        return {identity_factor.row(i).transpose()};
    }
    /// Mean of the training identity codes; the usual starting point for shape fitting.
    ShapeCode mean_code() const { return {identity_factor.colwise().mean().transpose()}; }
    BlendCode unit_blend(int j) const {
        if (j < 0 || j >= expressions) fail(Errc::not_found, "expression {} not in [0,{})", j, expressions);
        return {Eigen::VectorXd::Unit(expressions, j)};
    }
    BlendCode neutral() const { return unit_blend(0); }

    /// 3 x r matrix A with vertex position = A * s for the given blend code.
    Eigen::Matrix<double, 3, Eigen::Dynamic> vertex_basis(int vertex, const BlendCode& b) const {
        Eigen::Matrix<double, 3, Eigen::Dynamic> A(3, rank);
        for (int a = 0; a < 3; ++a) {
            const auto row = core.row(std::size_t(3) * vertex + a);
            for (int q = 0; q < rank; ++q) A(a, q) = row.segment(std::size_t(q) * expressions, expressions).dot(b.values);
        }
        return A;
    }
};

namespace detail {

inline void fix_column_signs(Eigen::MatrixXd& U) {
    for (Eigen::Index c = 0; c < U.cols(); ++c) {
        Eigen::Index best = 0;
        U.col(c).cwiseAbs().maxCoeff(&best);
        if (U(best, c) < 0) U.col(c) *= -1.0;
    }
}

} // namespace detail

/// Truncated Tucker decomposition on the identity mode only. The factor is the top-`rank` left singular
/// subspace of the mode-2 unfolding, obtained from the eigen-decomposition of its I x I Gram matrix.
inline BilinearModel build_bilinear_model(const VertexTensor& tensor, int rank) {
    if (tensor.vertex_count <= 0 || tensor.identities <= 0 || tensor.expressions <= 0)
        fail(Errc::invalid_argument, "vertex tensor dimensions must be positive");
    if (rank < 1 || rank > tensor.identities)
        fail(Errc::dimension_mismatch, "rank {} out of range [1, {}] (identity count)", rank, tensor.identities);
    if (tensor.data.size() != tensor.rows() * tensor.identities * tensor.expressions)
        fail(Errc::dimension_mismatch, "vertex tensor payload has {} entries", tensor.data.size());
    const int I = tensor.identities, E = tensor.expressions;
    const auto rows = static_cast<Eigen::Index>(tensor.rows());

    // Mode-2 unfolding X (I x 3N*E), column index k * E + j.
    Eigen::MatrixXd X(I, rows * E);
    for (Eigen::Index k = 0; k < rows; ++k)
        for (int i = 0; i < I; ++i)
            for (int j = 0; j < E; ++j) X(i, k * E + j) = tensor(std::size_t(k), i, j);
    if (X.cwiseAbs().maxCoeff() == 0.0) fail(Errc::numeric, "degenerate vertex tensor: all entries are zero");
    if (!X.allFinite()) fail(Errc::numeric, "vertex tensor holds non-finite entries");

    const Eigen::MatrixXd gram = X * X.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) fail(Errc::numeric, "eigen-decomposition of the identity Gram matrix failed");
    // eigenvalues ascend; take the last `rank` columns in descending order
    Eigen::MatrixXd U(I, rank);
    for (int c = 0; c < rank; ++c) U.col(c) = eig.eigenvectors().col(I - 1 - c);
    detail::fix_column_signs(U);

    const Eigen::MatrixXd C = U.transpose() * X; // rank x (3N*E)
    BilinearModel m;
    m.vertex_count = tensor.vertex_count;
    m.identities = I;
    m.expressions = E;
    m.rank = rank;
    m.identity_factor = U;
    m.faces = tensor.faces;
    m.core.resize(rows, Eigen::Index(rank) * E);
    for (Eigen::Index k = 0; k < rows; ++k)
        for (int q = 0; q < rank; ++q)
            for (int j = 0; j < E; ++j) m.core(k, Eigen::Index(q) * E + j) = C(q, k * E + j);
    return m;
}

/// Vertices (N x 3) of the model evaluated at shape code `s` and blend code `b`.
inline std::vector<Vec3> synthesize_vertices(const BilinearModel& model, const ShapeCode& s, const BlendCode& b) {
    if (s.values.size() != model.rank)
        fail(Errc::dimension_mismatch, "shape code has {} entries, model rank is {}", s.values.size(), model.rank);
    if (b.values.size() != model.expressions)
        fail(Errc::dimension_mismatch, "blend code has {} entries, model has {} expressions", b.values.size(),
             model.expressions);
    Eigen::VectorXd w(Eigen::Index(model.rank) * model.expressions);
    for (int q = 0; q < model.rank; ++q)
        w.segment(Eigen::Index(q) * model.expressions, model.expressions) = s.values[q] * b.values;
    const Eigen::VectorXd flat = model.core * w;
    std::vector<Vec3> out(model.vertex_count);
    for (int v = 0; v < model.vertex_count; ++v) out[v] = flat.segment<3>(3 * Eigen::Index(v));
    return out;
}

inline TriMesh synthesize_mesh(const BilinearModel& model, const ShapeCode& s, const BlendCode& b) {
    TriMesh m;
    m.vertices = synthesize_vertices(model, s, b);
    m.faces = model.faces;
    return m;
}

/// Delta-blendshape convention: b = e_0 + sum_j a_j (e_{j+1} - e_0). Under co-activation the non-neutral
/// weights may sum past one and b_0 goes negative; that is intended.
inline BlendCode blend_from_activations(std::span<const double> activations) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(Eigen::Index(activations.size()) + 1);
    b[0] = 1.0;
    for (std::size_t j = 0; j < activations.size(); ++j) {
        const double a = activations[j];
        if (!(a >= 0.0 && a <= 1.0)) fail(Errc::invalid_argument, "activation {} = {} outside [0,1]", j, a);
        b[Eigen::Index(j) + 1] += a;
        b[0] -= a;
    }
    return {b};
}

struct Landmark {
    int vertex = 0;
    Vec2 pixel = Vec2::Zero();
};

struct ShapeFitOptions {
    double ridge = 1e-6;
    int iterations = 5;
    double step_tolerance = 1e-8;
};

struct ShapeFit {
    ShapeCode s;
    double rms_residual = 0; // pixels
    int iterations = 0;
};

/// Damped Gauss-Newton on the landmark reprojection error with ridge penalty on s. Starts from the mean
/// identity code and re-linearizes the perspective projection every iteration.
inline ShapeFit fit_shape_landmarks(const BilinearModel& model, std::span<const Landmark> landmarks,
                                    const Camera& camera, const BlendCode& b, const ShapeFitOptions& opt = {}) {
    if (landmarks.empty()) fail(Errc::invalid_argument, "shape fitting needs at least one landmark");
    if (!(opt.ridge >= 0)) fail(Errc::invalid_argument, "ridge must be nonnegative");
    camera.validate();
    if (b.values.size() != model.expressions)
        fail(Errc::dimension_mismatch, "blend code has {} entries, model has {} expressions", b.values.size(),
             model.expressions);
    const int r = model.rank;
    std::vector<Eigen::Matrix<double, 3, Eigen::Dynamic>> basis;
    basis.reserve(landmarks.size());
    for (const auto& lm : landmarks) {
        if (lm.vertex < 0 || lm.vertex >= model.vertex_count)
            fail(Errc::invalid_argument, "landmark vertex {} out of range", lm.vertex);
        basis.push_back(camera.R * model.vertex_basis(lm.vertex, b));
    }
    const auto& K = camera.intrinsics;

    auto residuals = [&](const Eigen::VectorXd& s, Eigen::MatrixXd* J) {
        Eigen::VectorXd res(2 * Eigen::Index(landmarks.size()));
        if (J) J->resize(res.size(), r);
        for (std::size_t l = 0; l < landmarks.size(); ++l) {
            const Vec3 p = basis[l] * s + camera.t;
            if (!(p.z() > 1e-9)) fail(Errc::numeric, "landmark {} moved behind the camera during fitting", l);
            const double iz = 1.0 / p.z();
            res[2 * l] = K.fx * p.x() * iz + K.cx - landmarks[l].pixel.x();
            res[2 * l + 1] = K.fy * p.y() * iz + K.cy - landmarks[l].pixel.y();
            if (J) {
                // d(pixel)/d(p) then chain through p = A s + t
                Eigen::Matrix<double, 2, 3> dp;
                dp << K.fx * iz, 0, -K.fx * p.x() * iz * iz, 0, K.fy * iz, -K.fy * p.y() * iz * iz;
                J->middleRows(2 * Eigen::Index(l), 2) = dp * basis[l];
            }
        }
        return res;
    };

    ShapeFit out;
    Eigen::VectorXd s = model.mean_code().values;
    Eigen::MatrixXd J;
    for (int it = 0; it < opt.iterations; ++it) {
        const Eigen::VectorXd res = residuals(s, &J);
        const Eigen::MatrixXd H = J.transpose() * J + opt.ridge * Eigen::MatrixXd::Identity(r, r);
        const Eigen::VectorXd g = J.transpose() * res + opt.ridge * s;
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(H);
        if (qr.rank() < r)
            fail(Errc::numeric, "landmark normal matrix is singular (rank {} < {}); use a nonzero ridge", qr.rank(), r);
        const Eigen::VectorXd step = qr.solve(-g);
        s += step;
        out.iterations = it + 1;
        if (step.norm() < opt.step_tolerance) break;
    }
    const Eigen::VectorXd res = residuals(s, nullptr);
    out.s.values = s;
    out.rms_residual = std::sqrt(res.squaredNorm() / double(landmarks.size()));
    return out;
}

/// Pixel positions of model vertices under `camera`, for building landmark sets.
inline std::vector<Landmark> project_landmarks(const BilinearModel& model, const ShapeCode& s, const BlendCode& b,
                                               const Camera& camera, std::span<const int> vertices) {
    const auto verts = synthesize_vertices(model, s, b);
    std::vector<Landmark> out;
    for (int v : vertices) {
        if (v < 0 || v >= model.vertex_count) fail(Errc::invalid_argument, "landmark vertex {} out of range", v);
        out.push_back({v, camera.project(verts[v])});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model file: 16-byte magic, u32 N, I, E, r, then f64 core (3N x r x E row-major), identity factor
// (I x r row-major) and face indices (F x 3). F follows from the remaining payload size.

inline constexpr std::string_view kBilinearMagic{"H360BILINEAR\0\0\0\0", 16};

inline std::vector<char> serialize_model(const BilinearModel& m) {
    BinaryWriter w;
    w.bytes(kBilinearMagic.data(), kBilinearMagic.size());
    w.u32(static_cast<std::uint32_t>(m.vertex_count));
    w.u32(static_cast<std::uint32_t>(m.identities));
    w.u32(static_cast<std::uint32_t>(m.expressions));
    w.u32(static_cast<std::uint32_t>(m.rank));
    w.bytes(m.core.data(), std::size_t(m.core.size()) * sizeof(double));
    for (int i = 0; i < m.identities; ++i)
        for (int q = 0; q < m.rank; ++q) w.f64(m.identity_factor(i, q));
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) w.f64(static_cast<double>(f[k]));
    return w.buffer();
}

inline void save_model(const BilinearModel& m, const std::filesystem::path& path) {
    const auto buf = serialize_model(m);
    write_file(path, std::string_view(buf.data(), buf.size()));
}

inline BilinearModel load_model(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(kBilinearMagic);
    BilinearModel m;
    m.vertex_count = static_cast<int>(r.u32());
    m.identities = static_cast<int>(r.u32());
    m.expressions = static_cast<int>(r.u32());
    m.rank = static_cast<int>(r.u32());
    if (m.vertex_count <= 0 || m.identities <= 0 || m.expressions <= 0 || m.rank <= 0 || m.rank > m.identities)
        fail(Errc::parse, "{}: invalid model dimensions", path.string());
    m.core.resize(Eigen::Index(3) * m.vertex_count, Eigen::Index(m.rank) * m.expressions);
    r.bytes(m.core.data(), std::size_t(m.core.size()) * sizeof(double));
    m.identity_factor.resize(m.identities, m.rank);
    for (int i = 0; i < m.identities; ++i)
        for (int q = 0; q < m.rank; ++q) m.identity_factor(i, q) = r.f64();
    if (r.remaining() % (3 * sizeof(double)) != 0) fail(Errc::parse, "{}: truncated face table", path.string());
    const std::size_t nf = r.remaining() / (3 * sizeof(double));
    m.faces.resize(nf);
    for (auto& f : m.faces)
        for (int k = 0; k < 3; ++k) {
            const double v = r.f64();
            if (v < 0 || v >= m.vertex_count || v != std::floor(v))
                fail(Errc::parse, "{}: bad face index {}", path.string(), v);
            f[k] = static_cast<int>(v);
        }
    return m;
}

} // namespace head360
