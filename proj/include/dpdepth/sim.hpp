#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/attention.hpp"  // Axis
#include "dpdepth/core/rng.hpp"
#include "dpdepth/core/tensor.hpp"
#include "dpdepth/fmap.hpp"

// Synthetic RGB + dual-pixel + depth generator. Scenes are layered
// fronto-parallel rectangles over a background gradient; the DP pair is the
// green channel warped by half the signed defocus disparity in each
// direction, with disparity clamped to +-8 px.

namespace dpdepth {

struct SimConfig {
    int height = 64, width = 64;
    Real focus_invdepth = 0.5;  // v_f: inverse depth rendered with zero disparity
    Real disparity_gain = 12.0; // px of disparity per unit inverse-depth difference
    Axis axis = Axis::vertical;
    bool blur_with_defocus = false;
    std::uint64_t seed = 0;
};

// Physical bound of the dual-pixel model: |disparity| never exceeds 8 px.
inline constexpr Real kMaxDisparityPx = 8.0;

struct RgbDpSample {
    Tensor rgb;       // (H,W,3) in [0,1]
    Tensor dp_l;      // (H,W,1) in [0,1]
    Tensor dp_r;      // (H,W,1) in [0,1]
    Tensor invdepth;  // (H,W,1) in [0,1]
    Tensor mask;      // (H,W,1) in {0,1}; 0 where a DP warp sampled out of bounds
};

namespace detail {

/// Seeded value-noise texture in [0,1]: bilinear interpolation of a random
/// lattice with the given cell size.
inline Tensor value_noise(Rng& rng, int h, int w, int cell) {
    const int gh = h / cell + 2, gw = w / cell + 2;
    std::vector<Real> lattice(static_cast<size_t>(gh) * gw);
    for (auto& v : lattice) v = rng.uniform();
    Tensor out({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Real fy = static_cast<Real>(y) / cell, fx = static_cast<Real>(x) / cell;
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const Real ty = fy - y0, tx = fx - x0;
            const Real a = lattice[static_cast<size_t>(y0) * gw + x0];
            const Real b = lattice[static_cast<size_t>(y0) * gw + x0 + 1];
            const Real c = lattice[static_cast<size_t>(y0 + 1) * gw + x0];
            const Real d = lattice[static_cast<size_t>(y0 + 1) * gw + x0 + 1];
            out.at3(y, x, 0) = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
        }
    return out;
}

/// Clamped bilinear sample of a single-channel (H,W,1) map at fractional
/// (sy, sx); integer coordinates reproduce the stored value exactly.
inline Real sample_bilinear(const Tensor& img, Real sy, Real sx) {
    const int h = img.dim(0), w = img.dim(1);
    sy = std::min(std::max(sy, 0.0), static_cast<Real>(h - 1));
    sx = std::min(std::max(sx, 0.0), static_cast<Real>(w - 1));
    const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const Real ty = sy - y0, tx = sx - x0;
    const Real top = (1 - tx) * img.at3(y0, x0, 0) + tx * img.at3(y0, x1, 0);
    const Real bot = (1 - tx) * img.at3(y1, x0, 0) + tx * img.at3(y1, x1, 0);
    return (1 - ty) * top + ty * bot;
}

/// Per-pixel box blur with radius map r (integer radii); radius 0 copies the
/// input value exactly.
inline Tensor box_blur_varying(const Tensor& img, const std::vector<int>& radii) {
    const int h = img.dim(0), w = img.dim(1);
    Tensor out({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int r = radii[static_cast<size_t>(y * w + x)];
            if (r == 0) {
                out.at3(y, x, 0) = img.at3(y, x, 0);
                continue;
            }
            Real acc = 0.0;
            int cnt = 0;
            for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
                for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
                    acc += img.at3(yy, xx, 0);
                    ++cnt;
                }
            out.at3(y, x, 0) = acc / cnt;
        }
    return out;
}

}  // namespace detail

/// Layered scene: a background inverse-depth gradient in [0.02, 0.25] under
/// 3..8 textured (occasionally flat) rectangles with constant inverse depths
/// in [0.3, 1.0], drawn back to front so nearer layers occlude.
inline void generate_scene(std::uint64_t seed, int h, int w, Tensor& rgb, Tensor& invdepth) {
    if (h < 8 || w < 8) throw std::invalid_argument("generate_scene: extents must be >= 8");
    Rng rng(seed);
    rgb = Tensor({h, w, 3});
    invdepth = Tensor({h, w, 1});

    // Background: vertical inverse-depth gradient plus a tinted noise texture.
    const Real v0 = rng.uniform(0.02, 0.25), v1 = rng.uniform(0.02, 0.25);
    Tensor bg_noise = detail::value_noise(rng, h, w, 16);
    Real bg_tint[3] = {rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9)};
    for (int y = 0; y < h; ++y) {
        const Real v = v0 + (v1 - v0) * static_cast<Real>(y) / static_cast<Real>(h - 1);
        for (int x = 0; x < w; ++x) {
            invdepth.at3(y, x, 0) = v;
            for (int c = 0; c < 3; ++c)
                rgb.at3(y, x, c) = bg_tint[c] * (0.4 + 0.6 * bg_noise.at3(y, x, 0));
        }
    }

    struct Layer {
        int y0, x0, y1, x1;
        Real v;
        bool flat;
        Real color[3];
        Tensor tex;
    };
    const int n_layers = rng.uniform_int(3, 8);
    std::vector<Layer> layers(static_cast<size_t>(n_layers));
    for (auto& L : layers) {
        const int lw = rng.uniform_int(w / 8, 3 * w / 4);
        const int lh = rng.uniform_int(h / 8, 3 * h / 4);
        L.x0 = rng.uniform_int(0, w - lw - 1);
        L.y0 = rng.uniform_int(0, h - lh - 1);
        L.x1 = L.x0 + lw;
        L.y1 = L.y0 + lh;
        L.v = rng.uniform(0.3, 1.0);
        L.flat = rng.uniform() < 0.3;  // flat layers exercise textureless regions
        for (int c = 0; c < 3; ++c) L.color[c] = rng.uniform(0.1, 1.0);
        if (!L.flat) L.tex = detail::value_noise(rng, lh + 1, lw + 1, 8);
    }
    std::sort(layers.begin(), layers.end(), [](const Layer& a, const Layer& b) { return a.v < b.v; });
    for (const auto& L : layers)
        for (int y = L.y0; y <= L.y1; ++y)
            for (int x = L.x0; x <= L.x1; ++x) {
                invdepth.at3(y, x, 0) = L.v;
                const Real shade = L.flat ? 1.0 : 0.5 + 0.5 * L.tex.at3(y - L.y0, x - L.x0, 0);
                for (int c = 0; c < 3; ++c) rgb.at3(y, x, c) = std::min(1.0, L.color[c] * shade);
            }
}

/// Render the DP pair from a scene: per-pixel signed disparity
/// d = clamp(gain * (v - v_f), -8, +8); the left view samples the green
/// channel at +d/2 along the epipolar axis and the right view at -d/2
/// (bilinear). The mask zeroes pixels where either sample left the image.
inline void render_dp(const Tensor& rgb, const Tensor& invdepth, const SimConfig& sc, Tensor& dp_l,
                      Tensor& dp_r, Tensor& mask) {
    require_rank(rgb, 3, "render_dp");
    require_shape(invdepth, {rgb.dim(0), rgb.dim(1), 1}, "render_dp");
    const int h = rgb.dim(0), w = rgb.dim(1);
    Tensor gray({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) gray.at3(y, x, 0) = rgb.at3(y, x, 1);  // green channel only

    dp_l = Tensor({h, w, 1});
    dp_r = Tensor({h, w, 1});
    mask = Tensor({h, w, 1});
    std::vector<int> radii(static_cast<size_t>(h) * w, 0);
    const bool vertical = sc.axis == Axis::vertical;
    const Real limit = vertical ? static_cast<Real>(h - 1) : static_cast<Real>(w - 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Real delta = std::min(kMaxDisparityPx,
                                        std::max(-kMaxDisparityPx,
                                                 sc.disparity_gain * (invdepth.at3(y, x, 0) - sc.focus_invdepth)));
            const Real half = delta / 2.0;
            const Real base = vertical ? static_cast<Real>(y) : static_cast<Real>(x);
            const Real pl = base + half, pr = base - half;
            dp_l.at3(y, x, 0) = vertical ? detail::sample_bilinear(gray, pl, x) : detail::sample_bilinear(gray, y, pl);
            dp_r.at3(y, x, 0) = vertical ? detail::sample_bilinear(gray, pr, x) : detail::sample_bilinear(gray, y, pr);
            const bool ok = pl >= 0.0 && pl <= limit && pr >= 0.0 && pr <= limit;
            mask.at3(y, x, 0) = ok ? 1.0 : 0.0;
            radii[static_cast<size_t>(y * w + x)] = static_cast<int>(std::abs(delta) / 4.0);
        }
    if (sc.blur_with_defocus) {
        dp_l = detail::box_blur_varying(dp_l, radii);
        dp_r = detail::box_blur_varying(dp_r, radii);
    }
}

/// Full sample, quantized to the f32 grid so FMAP round trips are bit-exact.
inline RgbDpSample simulate_sample(const SimConfig& sc) {
    RgbDpSample s;
    generate_scene(sc.seed, sc.height, sc.width, s.rgb, s.invdepth);
    render_dp(s.rgb, s.invdepth, sc, s.dp_l, s.dp_r, s.mask);
    quantize_f32(s.rgb);
    quantize_f32(s.dp_l);
    quantize_f32(s.dp_r);
    quantize_f32(s.invdepth);
    quantize_f32(s.mask);
    return s;
}

// --------------------------------------------------------------- persistence

inline void write_sample(const RgbDpSample& s, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_fmap(dir + "/rgb.fmap", s.rgb);
    write_fmap(dir + "/dpl.fmap", s.dp_l);
    write_fmap(dir + "/dpr.fmap", s.dp_r);
    write_fmap(dir + "/invdepth.fmap", s.invdepth);
    write_fmap(dir + "/mask.fmap", s.mask);
}

inline RgbDpSample read_sample(const std::string& dir) {
    RgbDpSample s;
    s.rgb = read_fmap(dir + "/rgb.fmap");
    s.dp_l = read_fmap(dir + "/dpl.fmap");
    s.dp_r = read_fmap(dir + "/dpr.fmap");
    s.invdepth = read_fmap(dir + "/invdepth.fmap");
    s.mask = read_fmap(dir + "/mask.fmap");
    const int h = s.rgb.dim(0), w = s.rgb.dim(1);
    if (s.rgb.dim(2) != 3) throw std::runtime_error(dir + ": rgb.fmap must have 3 channels");
    const std::pair<const Tensor*, const char*> maps[] = {
        {&s.dp_l, "dpl"}, {&s.dp_r, "dpr"}, {&s.invdepth, "invdepth"}, {&s.mask, "mask"}};
    for (const auto& [t, name] : maps)
        if (t->dim(0) != h || t->dim(1) != w || t->dim(2) != 1)
            throw std::runtime_error(dir + ": " + std::string(name) + ".fmap extents disagree with rgb.fmap");
    return s;
}

// ------------------------------------------------------------------ datasets

struct ManifestEntry {
    std::string dir;    // resolved path to the sample directory
    std::string split;  // "train" | "val" | "test"
};

/// Split rule: sample index mod 10 -> 0..7 train, 8 val, 9 test (exactly
/// 80/10/10 for any multiple of 10).
inline const char* split_of_index(int i) {
    const int r = i % 10;
    return r < 8 ? "train" : (r == 8 ? "val" : "test");
}

/// Generate n samples with seeds seed..seed+n-1 under out_dir and write a
/// manifest ("relative_dir<TAB>split" LF lines). Returns the manifest path.
inline std::string make_dataset(int n, std::uint64_t seed, const std::string& out_dir,
                                const SimConfig& proto) {
    if (n < 1) throw std::invalid_argument("make_dataset: n must be >= 1");
    std::filesystem::create_directories(out_dir);
    std::string manifest;
    for (int i = 0; i < n; ++i) {
        SimConfig sc = proto;
        sc.seed = seed + static_cast<std::uint64_t>(i);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", i);
        write_sample(simulate_sample(sc), out_dir + "/" + name);
        manifest += std::string(name) + "\t" + split_of_index(i) + "\n";
    }
    const std::string path = out_dir + "/manifest.tsv";
    detail::write_file(path, manifest);
    return path;
}

/// Parse a manifest; sample paths are resolved relative to its directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error(manifest_path + ": cannot open manifest");
    const std::string base = std::filesystem::path(manifest_path).parent_path().string();
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(manifest_path + ":" + std::to_string(lineno) + ": missing tab separator");
        ManifestEntry e;
        e.dir = (base.empty() ? std::string(".") : base) + "/" + line.substr(0, tab);
        e.split = line.substr(tab + 1);
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw std::runtime_error(manifest_path + ":" + std::to_string(lineno) + ": unknown split '" +
                                     e.split + "'");
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace dpdepth
