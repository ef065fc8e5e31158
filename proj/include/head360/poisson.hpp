#pragma once

#include "head360/image.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCore>

namespace head360 {

struct PoissonOptions {
    double tolerance = 1e-10; // relative residual for conjugate gradient
    int max_iterations = 10000;
};

/// Gradient-domain blend: inside `mask` the result has the discrete Laplacian of `src` and matches `dst`
/// on the mask boundary; outside the mask `dst` is returned unchanged. The mask may not touch the image
/// border.
inline Image poisson_blend(const Image& src, const Image& dst, const Mask& mask, const PoissonOptions& opt = {}) {
    if (!src.same_size(dst) || mask.width != dst.width || mask.height != dst.height)
        fail(Errc::dimension_mismatch, "poisson_blend: src, dst and mask must share dimensions");
    const int w = dst.width, h = dst.height;
    std::vector<int> index(std::size_t(w) * h, -1);
    int unknowns = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!mask.at(x, y)) continue;
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1)
                fail(Errc::invalid_argument, "poisson_blend: mask pixel ({}, {}) touches the image border", x, y);
            index[std::size_t(y) * w + x] = unknowns++;
        }
    Image out = dst;
    out.alpha.clear();
    if (unknowns == 0) return out;

    // Negative Laplacian keeps the system symmetric positive definite.
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(std::size_t(unknowns) * 5);
    constexpr int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const int i = index[std::size_t(y) * w + x];
            if (i < 0) continue;
            trip.emplace_back(i, i, 4.0);
            for (int k = 0; k < 4; ++k) {
                const int j = index[std::size_t(y + dy[k]) * w + x + dx[k]];
                if (j >= 0) trip.emplace_back(i, j, -1.0);
            }
        }
    Eigen::SparseMatrix<double> A(unknowns, unknowns);
    A.setFromTriplets(trip.begin(), trip.end());
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
    cg.setTolerance(opt.tolerance);
    cg.setMaxIterations(opt.max_iterations);
    cg.compute(A);

    for (int c = 0; c < 3; ++c) {
        Eigen::VectorXd b(unknowns);
        for (int y = 1; y < h - 1; ++y)
            for (int x = 1; x < w - 1; ++x) {
                const int i = index[std::size_t(y) * w + x];
                if (i < 0) continue;
                double rhs = 4.0 * src.at(x, y, c);
                for (int k = 0; k < 4; ++k) {
                    const int nx = x + dx[k], ny = y + dy[k];
                    rhs -= src.at(nx, ny, c);
                    if (index[std::size_t(ny) * w + nx] < 0) rhs += dst.at(nx, ny, c);
                }
                b[i] = rhs;
            }
        const Eigen::VectorXd f = cg.solve(b);
        if (cg.info() != Eigen::Success)
            fail(Errc::numeric, "poisson_blend: conjugate gradient did not converge (error {})", cg.error());
        for (int y = 1; y < h - 1; ++y)
            for (int x = 1; x < w - 1; ++x) {
                const int i = index[std::size_t(y) * w + x];
                if (i >= 0) out.at(x, y, c) = static_cast<float>(f[i]);
            }
    }
    return out;
}

} // namespace head360
