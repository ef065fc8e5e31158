#pragma once

#include "head360/common.hpp"

#include <png.h>

#include <algorithm>
#include <csetjmp>

namespace head360 {

/// RGB float image, row-major, values nominally in [0,1]. Alpha is optional.
struct Image {
    int width = 0, height = 0;
    std::vector<float> rgb;   // height * width * 3
    std::vector<float> alpha; // empty or height * width

    Image() = default;
    Image(int w, int h, const Vec3& fill = Vec3::Zero()) : width(w), height(h), rgb(std::size_t(w) * h * 3) {
        for (std::size_t i = 0; i < rgb.size(); i += 3) {
            rgb[i] = static_cast<float>(fill.x());
            rgb[i + 1] = static_cast<float>(fill.y());
            rgb[i + 2] = static_cast<float>(fill.z());
        }
    }

    std::size_t pixel_count() const { return std::size_t(width) * height; }
    float& at(int x, int y, int c) { return rgb[(std::size_t(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const { return rgb[(std::size_t(y) * width + x) * 3 + c]; }
    Vec3 pixel(int x, int y) const {
        const float* p = &rgb[(std::size_t(y) * width + x) * 3];
        return {p[0], p[1], p[2]};
    }
    void set_pixel(int x, int y, const Vec3& v) {
        float* p = &rgb[(std::size_t(y) * width + x) * 3];
        p[0] = static_cast<float>(v.x());
        p[1] = static_cast<float>(v.y());
        p[2] = static_cast<float>(v.z());
    }
    bool same_size(const Image& o) const { return width == o.width && height == o.height; }

    void clamp01() {
        for (auto& v : rgb) v = std::clamp(v, 0.0f, 1.0f);
        for (auto& v : alpha) v = std::clamp(v, 0.0f, 1.0f);
    }
};

/// Binary mask stored as one byte per pixel (0 or 1).
struct Mask {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int w, int h, std::uint8_t fill = 0) : width(w), height(h), data(std::size_t(w) * h, fill) {}
    std::uint8_t& at(int x, int y) { return data[std::size_t(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return data[std::size_t(y) * width + x]; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), 1)); }
};

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// ---------------------------------------------------------------------------
// PNG (8 bit per channel, values stored as-is without any transfer function).

namespace detail {

struct PngWriteState {
    std::string* out;
};

inline void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* st = static_cast<PngWriteState*>(png_get_io_ptr(png));
    st->out->append(reinterpret_cast<const char*>(data), len);
}
inline void png_flush_cb(png_structp) {}

inline void png_warning_cb(png_structp, png_const_charp) {}

struct PngReadState {
    const unsigned char* data;
    std::size_t size, pos;
};

inline void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
    auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
    if (st->pos + len > st->size) png_error(png, "truncated stream");
    std::memcpy(out, st->data + st->pos, len);
    st->pos += len;
}

inline std::string encode_png_rows(int width, int height, int channels, const std::vector<std::uint8_t>& pixels) {
    std::string out;
    PngWriteState st{&out};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_cb);
    if (!png) fail(Errc::io, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    volatile const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_RGBA;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(Errc::io, "png encoding failed");
    }
    png_set_write_fn(png, &st, png_write_cb, png_flush_cb);
    png_set_IHDR(png, info, width, height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(&pixels[std::size_t(y) * width * channels]));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

struct DecodedPng {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;
};

inline DecodedPng decode_png(std::string_view bytes) {
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
        fail(Errc::parse, "not a PNG stream");
    PngReadState st{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0};
    DecodedPng out;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warning_cb);
    if (!png) fail(Errc::io, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(Errc::parse, "corrupt PNG stream");
    }
    png_set_read_fn(png, &st, png_read_cb);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    out.pixels.resize(std::size_t(out.width) * out.height * out.channels);
    for (int y = 0; y < out.height; ++y)
        png_read_row(png, &out.pixels[std::size_t(y) * out.width * out.channels], nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

} // namespace detail

/// Encodes RGB (or RGBA when the image has alpha and `with_alpha` is set) as 8-bit PNG bytes.
inline std::string encode_png(const Image& img, bool with_alpha = false) {
    const bool a = with_alpha && !img.alpha.empty();
    const int ch = a ? 4 : 3;
    std::vector<std::uint8_t> px(img.pixel_count() * ch);
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        for (int c = 0; c < 3; ++c) px[i * ch + c] = to_byte(img.rgb[i * 3 + c]);
        if (a) px[i * ch + 3] = to_byte(img.alpha[i]);
    }
    return detail::encode_png_rows(img.width, img.height, ch, px);
}

inline std::string encode_png(const Mask& m) {
    std::vector<std::uint8_t> px(m.data.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.data[i] ? 255 : 0;
    return detail::encode_png_rows(m.width, m.height, 1, px);
}

inline Image decode_png_image(std::string_view bytes) {
    const auto d = detail::decode_png(bytes);
    Image img(d.width, d.height);
    const bool gray = d.channels <= 2;
    const bool has_alpha = d.channels == 2 || d.channels == 4;
    if (has_alpha) img.alpha.resize(img.pixel_count());
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
        const std::uint8_t* p = &d.pixels[i * d.channels];
        for (int c = 0; c < 3; ++c) img.rgb[i * 3 + c] = (gray ? p[0] : p[c]) / 255.0f;
        if (has_alpha) img.alpha[i] = p[d.channels - 1] / 255.0f;
    }
    return img;
}

/// Any pixel with luminance above one half counts as set.
inline Mask decode_png_mask(std::string_view bytes) {
    const Image img = decode_png_image(bytes);
    Mask m(img.width, img.height);
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        const float lum = (img.rgb[i * 3] + img.rgb[i * 3 + 1] + img.rgb[i * 3 + 2]) / 3.0f;
        m.data[i] = lum > 0.5f ? 1 : 0;
    }
    return m;
}

inline void save_png(const Image& img, const std::filesystem::path& path) { write_file(path, encode_png(img)); }
inline void save_png(const Mask& m, const std::filesystem::path& path) { write_file(path, encode_png(m)); }

inline Image load_png(const std::filesystem::path& path) {
    const auto b = read_file(path);
    try {
        return decode_png_image(std::string_view(b.data(), b.size()));
    } catch (const Error& e) {
        fail(Errc::parse, "{}: {}", path.string(), e.what());
    }
}

inline Mask load_png_mask(const std::filesystem::path& path) {
    const auto b = read_file(path);
    return decode_png_mask(std::string_view(b.data(), b.size()));
}

// Raw float dump for test fixtures: "H360RAW\0", u32 width, height, channels, f32 payload.

inline void save_raw(const Image& img, const std::filesystem::path& path) {
    BinaryWriter w;
    w.bytes("H360RAW\0", 8);
    w.u32(static_cast<std::uint32_t>(img.width));
    w.u32(static_cast<std::uint32_t>(img.height));
    w.u32(img.alpha.empty() ? 3u : 4u);
    w.array<float>(img.rgb);
    if (!img.alpha.empty()) w.array<float>(img.alpha);
    w.save(path);
}

inline Image load_raw(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(std::string_view("H360RAW\0", 8));
    const auto w = r.u32(), h = r.u32(), c = r.u32();
    if (c != 3 && c != 4) fail(Errc::parse, "{}: unsupported channel count {}", path.string(), c);
    Image img(static_cast<int>(w), static_cast<int>(h));
    img.rgb = r.array<float>(std::size_t(w) * h * 3);
    if (c == 4) img.alpha = r.array<float>(std::size_t(w) * h);
    r.expect_end();
    return img;
}

} // namespace head360
