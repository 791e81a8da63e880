#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpdepth/fmap.hpp"
#include "dpdepth/model.hpp"

// DPCK checkpoint container (little-endian): magic "DPCK", version byte = 1,
// u32 stage tag, u64 step counter, u32 tensor count, then per tensor a u32
// name length, the UTF-8 name, u32 rank, u32 dims, and the f32 row-major
// payload. A trailing flag byte marks whether Adam moments follow (first and
// second moment payloads per tensor, in the same order and shapes). Values
// are kept on the f32 grid throughout training, so the round trip is
// bit-exact.

namespace dpdepth {

inline constexpr std::uint8_t kDpckVersion = 1;

struct Checkpoint {
    std::uint32_t stage = 0;
    std::uint64_t step = 0;
    bool has_moments = false;
    std::vector<Param> tensors;  // file order; m/v empty unless has_moments

    const Param* find(const std::string& name) const {
        for (const auto& p : tensors)
            if (p.name == name) return &p;
        return nullptr;
    }
};

inline void save_checkpoint(const std::string& path, const ParamSet& ps, std::uint32_t stage,
                            std::uint64_t step, bool with_moments) {
    std::string out;
    out += "DPCK";
    out.push_back(static_cast<char>(kDpckVersion));
    detail::put_u32(out, stage);
    detail::put_u64(out, step);
    detail::put_u32(out, static_cast<std::uint32_t>(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        const Param& p = ps[i];
        detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        detail::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
        for (int d = 0; d < p.value.rank(); ++d)
            detail::put_u32(out, static_cast<std::uint32_t>(p.value.dim(d)));
        for (std::int64_t j = 0; j < p.value.numel(); ++j)
            detail::put_f32(out, static_cast<float>(p.value[j]));
    }
    out.push_back(with_moments ? 1 : 0);
    if (with_moments) {
        for (size_t i = 0; i < ps.size(); ++i)
            for (std::int64_t j = 0; j < ps[i].m.numel(); ++j)
                detail::put_f32(out, static_cast<float>(ps[i].m[j]));
        for (size_t i = 0; i < ps.size(); ++i)
            for (std::int64_t j = 0; j < ps[i].v.numel(); ++j)
                detail::put_f32(out, static_cast<float>(ps[i].v[j]));
    }
    detail::write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string buf = detail::read_file(path);
    detail::ByteReader r{buf, 0, path};
    if (r.bytes(4) != "DPCK") throw std::runtime_error(path + ": bad magic (not a DPCK file)");
    const std::uint8_t version = r.u8();
    if (version != kDpckVersion)
        throw std::runtime_error(path + ": unsupported DPCK version " + std::to_string(version));
    Checkpoint ck;
    ck.stage = r.u32();
    ck.step = r.u64();
    const std::uint32_t n = r.u32();
    ck.tensors.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        Param& p = ck.tensors[i];
        const std::uint32_t name_len = r.u32();
        p.name = r.bytes(name_len);
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw std::runtime_error(path + ": bad tensor rank for " + p.name);
        std::vector<int> shape(rank);
        std::uint64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t e = r.u32();
            numel *= e;
            if (e == 0 || numel > detail::kMaxFmapElems)
                throw std::runtime_error(path + ": dimension overflow for " + p.name);
            shape[d] = static_cast<int>(e);
        }
        p.value = Tensor(shape);
        for (std::int64_t j = 0; j < p.value.numel(); ++j)
            p.value[j] = static_cast<double>(r.f32());
    }
    ck.has_moments = r.u8() != 0;
    if (ck.has_moments) {
        for (auto& p : ck.tensors) {
            p.m = Tensor(p.value.shape);
            for (std::int64_t j = 0; j < p.m.numel(); ++j) p.m[j] = static_cast<double>(r.f32());
        }
        for (auto& p : ck.tensors) {
            p.v = Tensor(p.value.shape);
            for (std::int64_t j = 0; j < p.v.numel(); ++j) p.v[j] = static_cast<double>(r.f32());
        }
    }
    if (r.pos != buf.size())
        throw std::runtime_error(path + ": size mismatch (" + std::to_string(buf.size() - r.pos) +
                                 " trailing bytes)");
    return ck;
}

/// Restores a whole model: the checkpoint must carry exactly the same tensor
/// names, in the same order, with the same shapes — anything else fails
/// loudly. Moments restore too when present (otherwise they stay zero).
inline void apply_checkpoint(ParamSet& ps, const Checkpoint& ck, const std::string& from) {
    if (ck.tensors.size() != ps.size())
        throw std::runtime_error(from + ": checkpoint has " + std::to_string(ck.tensors.size()) +
                                 " tensors, model expects " + std::to_string(ps.size()));
    for (size_t i = 0; i < ps.size(); ++i) {
        const Param& src = ck.tensors[i];
        Param& dst = ps[i];
        if (src.name != dst.name)
            throw std::runtime_error(from + ": tensor " + std::to_string(i) + " is '" + src.name +
                                     "', model expects '" + dst.name + "'");
        require_shape(src.value, dst.value.shape, from + ": " + src.name);
        dst.value = src.value;
        if (ck.has_moments) {
            dst.m = src.m;
            dst.v = src.v;
        }
    }
}

/// Copies only the tensors whose name starts with prefix (e.g. "dp_encoder.")
/// from the checkpoint into the model; every such model tensor must be
/// present with a matching shape. Extra checkpoint tensors are ignored.
/// with_moments=false transfers weights but leaves optimizer state zeroed —
/// the cross-stage wiring carries learned values, not Adam history.
/// Returns the number of tensors copied (throws if none matched).
inline int apply_checkpoint_prefix(ParamSet& ps, const Checkpoint& ck, const std::string& prefix,
                                   const std::string& from, bool with_moments = true) {
    std::unordered_map<std::string, const Param*> by_name;
    for (const auto& p : ck.tensors) by_name.emplace(p.name, &p);
    int copied = 0;
    for (size_t i = 0; i < ps.size(); ++i) {
        Param& dst = ps[i];
        if (dst.name.rfind(prefix, 0) != 0) continue;
        auto it = by_name.find(dst.name);
        if (it == by_name.end())
            throw std::runtime_error(from + ": missing tensor '" + dst.name + "' for prefix " + prefix);
        require_shape(it->second->value, dst.value.shape, from + ": " + dst.name);
        dst.value = it->second->value;
        if (ck.has_moments && with_moments) {
            dst.m = it->second->m;
            dst.v = it->second->v;
        }
        ++copied;
    }
    if (copied == 0) throw std::runtime_error(from + ": no tensors matched prefix " + prefix);
    return copied;
}

}  // namespace dpdepth
