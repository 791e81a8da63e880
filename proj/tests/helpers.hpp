#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/core/rng.hpp"
#include "dpdepth/core/tensor.hpp"

// Shared test utilities: seeded random tensors, masks with guaranteed valid
// pixels, and scratch directories under the system temp root.

namespace testutil {

inline dpdepth::Tensor rand_tensor(std::uint64_t seed, std::vector<int> shape, double lo, double hi) {
    dpdepth::Rng rng(seed);
    dpdepth::Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// {0,1} mask with random holes; the first two entries are forced valid so
/// rank statistics stay well defined.
inline dpdepth::Tensor rand_mask(std::uint64_t seed, std::vector<int> shape, double keep = 0.8) {
    dpdepth::Rng rng(seed);
    dpdepth::Tensor m(std::move(shape));
    for (std::int64_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform() < keep ? 1.0 : 0.0;
    if (m.numel() >= 2) {
        m[0] = 1.0;
        m[1] = 1.0;
    }
    return m;
}

/// Fresh scratch directory <tmp>/<name>; wiped if a previous run left one.
inline std::string scratch_dir(const std::string& name) {
    namespace fs = std::filesystem;
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace testutil
