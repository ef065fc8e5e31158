#pragma once

#include "head360/service.hpp"

#include <gtest/gtest.h>

#include <unistd.h>

namespace testsupport {

namespace fs = std::filesystem;
using namespace head360;

inline fs::path cache_root() {
    const fs::path p = fs::path(HEAD360_TEST_CACHE);
    fs::create_directories(p);
    return p;
}

inline fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / fmt::format("head360_{}_{}", name, ::getpid());
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Builds into a private directory and renames it into place, so concurrent test processes never
// observe a half-written cache entry.
template <typename Build>
fs::path cached(const std::string& name, Build&& build) {
    const fs::path dst = cache_root() / name;
    if (fs::exists(dst / ".complete")) return dst;
    const fs::path tmp = cache_root() / fmt::format("{}.tmp{}", name, ::getpid());
    fs::remove_all(tmp);
    build(tmp);
    write_file(tmp / ".complete", "");
    std::error_code ec;
    fs::rename(tmp, dst, ec);
    if (ec) fs::remove_all(tmp);
    return dst;
}

inline DatasetSpec tiny_spec() {
    DatasetSpec s;
    s.identities = 4;
    s.expressions = 3;
    s.yaw_count = 8;
    s.pitch_angles = {-15.0, 15.0};
    s.image_size = 32;
    s.subdivision = 3;
    return s;
}

inline fs::path tiny_dataset() {
    return cached("tiny_data", [](const fs::path& dir) { render_dataset(tiny_spec(), dir); });
}

inline TrainConfig tiny_train_config() {
    TrainConfig c;
    c.channels = 4;
    c.raster.resolution = 32;
    c.render.samples = 24;
    c.head_steps = 40;
    c.hair_steps = 30;
    c.rays_per_step = 128;
    c.density_pairs = 32;
    c.expressions = {0};
    return c;
}

inline fs::path tiny_library_dir() {
    return cached("tiny_lib", [](const fs::path& dir) {
        TrainResult r = train_head_library(tiny_dataset(), tiny_train_config(), {});
        save_training_checkpoint(r, tiny_train_config().head_steps, tiny_train_config().hair_steps, dir);
    });
}

inline const HeadLibrary& tiny_library() {
    static const HeadLibrary lib = load_library(tiny_library_dir());
    return lib;
}

inline Image random_image(int w, int h, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    Image img(w, h);
    for (auto& v : img.rgb) v = u(rng);
    return img;
}

inline std::string bytes_of(const fs::path& p) {
    const auto b = read_file(p);
    return std::string(b.begin(), b.end());
}

} // namespace testsupport
