#pragma once

#include "head360/common.hpp"

#include <zlib.h>

namespace head360 {

/// Store-only (uncompressed) zip archive with fixed timestamps, so equal inputs give equal bytes.
class ZipWriter {
public:
    void add(const std::string& name, std::string_view data) {
        if (name.empty() || name.size() > 0xFFFF) fail(Errc::invalid_argument, "bad zip entry name '{}'", name);
        if (data.size() >= 0xFFFFFFFFull) fail(Errc::invalid_argument, "zip entry '{}' too large", name);
        Entry e{name, static_cast<std::uint32_t>(out_.size()), 0, static_cast<std::uint32_t>(data.size())};
        e.crc = static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
        u32(0x04034b50);
        u16(20);
        u16(0);
        u16(0); // stored
        u16(0);
        u16(0x21); // 1980-01-01
        u32(e.crc);
        u32(e.size);
        u32(e.size);
        u16(static_cast<std::uint16_t>(name.size()));
        u16(0);
        out_ += name;
        out_.append(data.data(), data.size());
        entries_.push_back(std::move(e));
    }

    std::string finish() {
        const auto cd_start = static_cast<std::uint32_t>(out_.size());
        for (const auto& e : entries_) {
            u32(0x02014b50);
            u16(20);
            u16(20);
            u16(0);
            u16(0);
            u16(0);
            u16(0x21);
            u32(e.crc);
            u32(e.size);
            u32(e.size);
            u16(static_cast<std::uint16_t>(e.name.size()));
            u16(0);
            u16(0);
            u16(0);
            u16(0);
            u32(0);
            u32(e.offset);
            out_ += e.name;
        }
        const auto cd_size = static_cast<std::uint32_t>(out_.size()) - cd_start;
        u32(0x06054b50);
        u16(0);
        u16(0);
        u16(static_cast<std::uint16_t>(entries_.size()));
        u16(static_cast<std::uint16_t>(entries_.size()));
        u32(cd_size);
        u32(cd_start);
        u16(0);
        return std::move(out_);
    }

private:
    struct Entry {
        std::string name;
        std::uint32_t offset, crc, size;
    };
    void u16(std::uint16_t v) {
        out_ += char(v & 0xFF);
        out_ += char(v >> 8);
    }
    void u32(std::uint32_t v) {
        u16(std::uint16_t(v & 0xFFFF));
        u16(std::uint16_t(v >> 16));
    }
    std::string out_;
    std::vector<Entry> entries_;
};

/// Reads back a store-only archive (used by tests and clients of the bundles).
inline std::map<std::string, std::string> read_stored_zip(std::string_view z) {
    auto rd16 = [&](std::size_t p) {
        if (p + 2 > z.size()) fail(Errc::parse, "truncated zip");
        return std::uint16_t(std::uint8_t(z[p]) | (std::uint8_t(z[p + 1]) << 8));
    };
    auto rd32 = [&](std::size_t p) { return std::uint32_t(rd16(p)) | (std::uint32_t(rd16(p + 2)) << 16); };
    std::map<std::string, std::string> out;
    std::size_t p = 0;
    while (p + 4 <= z.size() && rd32(p) == 0x04034b50) {
        if (rd16(p + 8) != 0) fail(Errc::parse, "only stored zip entries are supported");
        const std::uint32_t crc = rd32(p + 14), size = rd32(p + 18);
        const std::uint16_t nlen = rd16(p + 26), xlen = rd16(p + 28);
        const std::size_t data_at = p + 30 + nlen + xlen;
        if (data_at + size > z.size()) fail(Errc::parse, "truncated zip entry");
        std::string name(z.substr(p + 30, nlen));
        std::string data(z.substr(data_at, size));
        if (crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())) != crc)
            fail(Errc::parse, "crc mismatch in zip entry '{}'", name);
        out.emplace(std::move(name), std::move(data));
        p = data_at + size;
    }
    return out;
}

} // namespace head360
