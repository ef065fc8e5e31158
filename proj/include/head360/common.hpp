#pragma once

#include <Eigen/Core>
#include <fmt/format.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace head360 {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with host byte order and must be little-endian");

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Face = std::array<int, 3>;

// Error categories map onto CLI exit codes and HTTP status codes.
enum class Errc {
    invalid_argument,   // usage / precondition violation
    dimension_mismatch, // sizes disagree with the loaded model
    not_found,          // unknown id or missing file
    io,                 // filesystem failure
    parse,              // malformed input file
    numeric,            // singular system, non-finite values, divergence
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

template <typename... Args>
[[noreturn]] inline void fail(Errc code, fmt::format_string<Args...> f, Args&&... args) {
    throw Error(code, fmt::format(f, std::forward<Args>(args)...));
}

inline void require(bool cond, Errc code, std::string_view msg) {
    if (!cond) throw Error(code, std::string(msg));
}

// ---------------------------------------------------------------------------
// Little-endian binary streams used by all model/checkpoint file formats.

class BinaryWriter {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    template <typename T>
    void array(std::span<const T> values) {
        bytes(values.data(), values.size_bytes());
    }

    const std::vector<char>& buffer() const { return buf_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::io, "cannot open '{}' for writing", path.string());
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) fail(Errc::io, "write failed for '{}'", path.string());
    }

private:
    std::vector<char> buf_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot open '{}'", path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io, "cannot open '{}' for writing", path.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) fail(Errc::io, "write failed for '{}'", path.string());
}

class BinaryReader {
public:
    BinaryReader(std::vector<char> data, std::string source)
        : data_(std::move(data)), source_(std::move(source)) {}

    void bytes(void* out, std::size_t n) {
        if (pos_ + n > data_.size()) fail(Errc::parse, "{}: unexpected end of file", source_);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    float f32() {
        float v;
        bytes(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, sizeof v);
        return v;
    }
    template <typename T>
    std::vector<T> array(std::size_t count) {
        std::vector<T> v(count);
        bytes(v.data(), count * sizeof(T));
        return v;
    }
    void expect_magic(std::string_view magic) {
        std::string got(magic.size(), '\0');
        bytes(got.data(), got.size());
        if (got != magic) fail(Errc::parse, "{}: bad magic header", source_);
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    void expect_end() const {
        if (remaining() != 0) fail(Errc::parse, "{}: {} trailing bytes", source_, remaining());
    }
    const std::string& source() const { return source_; }

private:
    std::vector<char> data_;
    std::string source_;
    std::size_t pos_ = 0;
};

inline bool all_finite(std::span<const float> v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}
inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace head360
