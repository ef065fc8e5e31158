#pragma once

#include "head360/image.hpp"

namespace head360 {

/// PSNR in dB for peak value 1.0. Identical images report the 99 dB cap.
inline double psnr(const Image& a, const Image& b) {
    if (!a.same_size(b))
        fail(Errc::dimension_mismatch, "psnr: {}x{} vs {}x{}", a.width, a.height, b.width, b.height);
    require(!a.rgb.empty(), Errc::invalid_argument, "psnr: empty image");
    double se = 0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = double(a.rgb[i]) - double(b.rgb[i]);
        se += d * d;
    }
    const double mse = se / double(a.rgb.size());
    if (mse <= 0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

/// PSNR restricted to pixels where `mask` is set.
inline double psnr_masked(const Image& a, const Image& b, const Mask& mask) {
    if (!a.same_size(b) || mask.width != a.width || mask.height != a.height)
        fail(Errc::dimension_mismatch, "psnr_masked: size mismatch");
    double se = 0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < a.pixel_count(); ++p) {
        if (!mask.data[p]) continue;
        for (int c = 0; c < 3; ++c) {
            const double d = double(a.rgb[p * 3 + c]) - double(b.rgb[p * 3 + c]);
            se += d * d;
        }
        n += 3;
    }
    require(n > 0, Errc::invalid_argument, "psnr_masked: empty mask");
    const double mse = se / double(n);
    if (mse <= 0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01, k2 = 0.03;
    double peak = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    const double c = 0.5 * (size - 1);
    double sum = 0;
    for (int i = 0; i < size; ++i) {
        k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        sum += k[i];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// "valid" separable filtering: output is (w - k + 1) x (h - k + 1)
inline std::vector<double> filter_valid(const std::vector<double>& src, int w, int h, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int ow = w - n + 1, oh = h - n + 1;
    std::vector<double> tmp(std::size_t(ow) * h), out(std::size_t(ow) * oh);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < n; ++i) s += k[i] * src[std::size_t(y) * w + x + i];
            tmp[std::size_t(y) * ow + x] = s;
        }
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < n; ++i) s += k[i] * tmp[std::size_t(y + i) * ow + x];
            out[std::size_t(y) * ow + x] = s;
        }
    return out;
}

} // namespace detail

/// Mean SSIM with a Gaussian window, averaged over the valid window positions of each channel and
/// then over the three channels.
inline double ssim(const Image& a, const Image& b, const SsimParams& p = {}) {
    if (!a.same_size(b))
        fail(Errc::dimension_mismatch, "ssim: {}x{} vs {}x{}", a.width, a.height, b.width, b.height);
    if (a.width < p.window || a.height < p.window)
        fail(Errc::invalid_argument, "ssim: image {}x{} smaller than the {}x{} window", a.width, a.height, p.window,
             p.window);
    const double c1 = (p.k1 * p.peak) * (p.k1 * p.peak), c2 = (p.k2 * p.peak) * (p.k2 * p.peak);
    const auto k = detail::gaussian_kernel(p.window, p.sigma);
    const int w = a.width, h = a.height;
    double total = 0;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> x(std::size_t(w) * h), y(x.size()), xx(x.size()), yy(x.size()), xy(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = a.rgb[i * 3 + c];
            y[i] = b.rgb[i * 3 + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = detail::filter_valid(x, w, h, k), my = detail::filter_valid(y, w, h, k);
        const auto sxx = detail::filter_valid(xx, w, h, k), syy = detail::filter_valid(yy, w, h, k),
                   sxy = detail::filter_valid(xy, w, h, k);
        double sum = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
            sum += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / double(mx.size());
    }
    return total / 3.0;
}

} // namespace head360
