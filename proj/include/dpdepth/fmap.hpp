#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/core/tensor.hpp"

// FMAP: a minimal lossless float-map container. Little-endian layout:
//   magic "FMAP" (4 bytes), version byte = 1,
//   u32 width, u32 height, u32 channels,
//   width*height*channels f32 values, row-major, channel-interleaved.
// Values are stored in single precision; tensors hold doubles, so a round
// trip reproduces exactly those tensors whose entries sit on the f32 grid
// (quantize_f32 puts them there).

namespace dpdepth {

namespace detail {

inline constexpr std::uint64_t kMaxFmapElems = 1ull << 28;  // 1 GiB of f32 payload

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

/// Cursor over a loaded byte buffer; throws the caller's diagnostic prefix
/// plus "truncated" when reads run past the end.
struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    std::string where;

    void need(size_t n) const {
        if (pos + n > buf.size())
            throw std::runtime_error(where + ": truncated (need " + std::to_string(pos + n) + " bytes, have " +
                                     std::to_string(buf.size()) + ")");
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        return lo | (static_cast<std::uint64_t>(u32()) << 32);
    }
    float f32() {
        const std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace detail

inline void write_fmap(const std::string& path, const Tensor& t) {
    require_rank(t, 3, "write_fmap");
    std::string out;
    out.reserve(17 + static_cast<size_t>(t.numel()) * 4);
    out += "FMAP";
    out.push_back(static_cast<char>(1));  // version
    detail::put_u32(out, static_cast<std::uint32_t>(t.dim(1)));  // width
    detail::put_u32(out, static_cast<std::uint32_t>(t.dim(0)));  // height
    detail::put_u32(out, static_cast<std::uint32_t>(t.dim(2)));  // channels
    for (std::int64_t i = 0; i < t.numel(); ++i) detail::put_f32(out, static_cast<float>(t[i]));
    detail::write_file(path, out);
}

inline Tensor read_fmap(const std::string& path) {
    const std::string buf = detail::read_file(path);
    detail::ByteReader r{buf, 0, path};
    if (r.bytes(4) != "FMAP") throw std::runtime_error(path + ": bad magic (not an FMAP file)");
    const std::uint8_t version = r.u8();
    if (version != 1) throw std::runtime_error(path + ": unsupported FMAP version " + std::to_string(version));
    const std::uint32_t w = r.u32();
    const std::uint32_t h = r.u32();
    const std::uint32_t c = r.u32();
    if (w == 0 || h == 0 || c == 0 ||
        static_cast<std::uint64_t>(w) * h * c > detail::kMaxFmapElems)
        throw std::runtime_error(path + ": dimension overflow (" + std::to_string(w) + "x" + std::to_string(h) +
                                 "x" + std::to_string(c) + ")");
    const std::uint64_t n = static_cast<std::uint64_t>(w) * h * c;
    r.need(static_cast<size_t>(n) * 4);
    if (buf.size() != r.pos + n * 4)
        throw std::runtime_error(path + ": size mismatch (" + std::to_string(buf.size()) + " bytes for " +
                                 std::to_string(r.pos + n * 4) + " expected)");
    Tensor t({static_cast<int>(h), static_cast<int>(w), static_cast<int>(c)});
    for (std::uint64_t i = 0; i < n; ++i) t[static_cast<std::int64_t>(i)] = static_cast<double>(r.f32());
    return t;
}

}  // namespace dpdepth
