#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpdepth/fmap.hpp"
#include "dpdepth/sim.hpp"

#include "helpers.hpp"

using namespace dpdepth;
using Catch::Matchers::ContainsSubstring;
using testutil::rand_tensor;
using testutil::read_file_bytes;
using testutil::scratch_dir;

namespace {

void write_bytes(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    REQUIRE(out.good());
}

std::uint32_t le32(const std::string& buf, size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    return v;
}

/// The random variates behind one scene, re-drawn in documented order but not
/// painted: the test predicts each pixel from the front-most covering
/// rectangle instead of replaying the back-to-front painter.
struct ReplayLayer {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    Real v = 0.0;
    bool flat = false;
    Real color[3] = {0, 0, 0};
    Tensor tex;
};

struct ReplayScene {
    Real v0 = 0.0, v1 = 0.0;
    Tensor bg_noise;
    Real bg_tint[3] = {0, 0, 0};
    std::vector<ReplayLayer> layers;
};

ReplayScene replay_scene_draws(std::uint64_t seed, int h, int w) {
    Rng rng(seed);
    ReplayScene s;
    s.v0 = rng.uniform(0.02, 0.25);
    s.v1 = rng.uniform(0.02, 0.25);
    s.bg_noise = detail::value_noise(rng, h, w, 16);
    for (int c = 0; c < 3; ++c) s.bg_tint[c] = rng.uniform(0.2, 0.9);
    const int n_layers = rng.uniform_int(3, 8);
    REQUIRE(n_layers >= 3);
    REQUIRE(n_layers <= 8);
    s.layers.resize(static_cast<size_t>(n_layers));
    for (auto& L : s.layers) {
        const int lw = rng.uniform_int(w / 8, 3 * w / 4);
        const int lh = rng.uniform_int(h / 8, 3 * h / 4);
        L.x0 = rng.uniform_int(0, w - lw - 1);
        L.y0 = rng.uniform_int(0, h - lh - 1);
        L.x1 = L.x0 + lw;
        L.y1 = L.y0 + lh;
        L.v = rng.uniform(0.3, 1.0);
        L.flat = rng.uniform() < 0.3;
        for (int c = 0; c < 3; ++c) L.color[c] = rng.uniform(0.1, 1.0);
        if (!L.flat) L.tex = detail::value_noise(rng, lh + 1, lw + 1, 8);
    }
    return s;
}

Tensor green_of(const Tensor& rgb) {
    Tensor g({rgb.dim(0), rgb.dim(1), 1});
    for (int y = 0; y < rgb.dim(0); ++y)
        for (int x = 0; x < rgb.dim(1); ++x) g.at3(y, x, 0) = rgb.at3(y, x, 1);
    return g;
}

}  // namespace

TEST_CASE("value noise interpolates a seeded lattice", "[sim]") {
    const int h = 20, w = 24, cell = 8;
    const int gh = h / cell + 2, gw = w / cell + 2;

    Rng draws(11);
    std::vector<Real> lattice(static_cast<size_t>(gh) * gw);
    for (auto& v : lattice) v = draws.uniform();

    Rng used(11);
    const Tensor tex = detail::value_noise(used, h, w, cell);
    REQUIRE(tex.dim(0) == h);
    REQUIRE(tex.dim(1) == w);
    REQUIRE(tex.dim(2) == 1);

    // Lattice-aligned pixels reproduce their lattice values exactly.
    for (int ky = 0; ky * cell < h; ++ky)
        for (int kx = 0; kx * cell < w; ++kx)
            REQUIRE(tex.at3(ky * cell, kx * cell, 0) == lattice[static_cast<size_t>(ky) * gw + kx]);

    // An off-lattice pixel matches the bilinear blend of its cell corners.
    const int y = 5, x = 13;
    const Real fy = static_cast<Real>(y) / cell, fx = static_cast<Real>(x) / cell;
    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    const Real ty = fy - y0, tx = fx - x0;
    const Real a = lattice[static_cast<size_t>(y0) * gw + x0];
    const Real b = lattice[static_cast<size_t>(y0) * gw + x0 + 1];
    const Real c = lattice[static_cast<size_t>(y0 + 1) * gw + x0];
    const Real d = lattice[static_cast<size_t>(y0 + 1) * gw + x0 + 1];
    REQUIRE(tex.at3(y, x, 0) == (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d));

    for (std::int64_t i = 0; i < tex.numel(); ++i) {
        REQUIRE(tex[i] >= 0.0);
        REQUIRE(tex[i] <= 1.0);
    }

    // Both generators consumed the same number of draws.
    REQUIRE(draws.uniform() == used.uniform());
}

TEST_CASE("scene generation matches a front-most-rectangle replay", "[sim]") {
    const std::uint64_t seeds[] = {1, 7, 123};
    const int shapes[][2] = {{64, 64}, {32, 48}, {40, 32}};
    for (int k = 0; k < 3; ++k) {
        const std::uint64_t seed = seeds[k];
        const int h = shapes[k][0], w = shapes[k][1];
        CAPTURE(seed, h, w);

        Tensor rgb, invdepth;
        generate_scene(seed, h, w, rgb, invdepth);
        const ReplayScene s = replay_scene_draws(seed, h, w);

        // The argmax tiebreak below needs distinct rectangle depths.
        for (size_t i = 0; i < s.layers.size(); ++i)
            for (size_t j = i + 1; j < s.layers.size(); ++j) REQUIRE(s.layers[i].v != s.layers[j].v);

        Tensor exp_rgb({h, w, 3}), exp_inv({h, w, 1});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const ReplayLayer* front = nullptr;
                for (const auto& L : s.layers)
                    if (y >= L.y0 && y <= L.y1 && x >= L.x0 && x <= L.x1 && (front == nullptr || L.v > front->v))
                        front = &L;
                if (front != nullptr) {
                    exp_inv.at3(y, x, 0) = front->v;
                    const Real shade = front->flat ? 1.0 : 0.5 + 0.5 * front->tex.at3(y - front->y0, x - front->x0, 0);
                    for (int c = 0; c < 3; ++c) exp_rgb.at3(y, x, c) = std::min(1.0, front->color[c] * shade);
                } else {
                    exp_inv.at3(y, x, 0) = s.v0 + (s.v1 - s.v0) * static_cast<Real>(y) / static_cast<Real>(h - 1);
                    for (int c = 0; c < 3; ++c)
                        exp_rgb.at3(y, x, c) = s.bg_tint[c] * (0.4 + 0.6 * s.bg_noise.at3(y, x, 0));
                }
            }

        REQUIRE(bit_equal(invdepth, exp_inv));
        REQUIRE(bit_equal(rgb, exp_rgb));
    }
}

TEST_CASE("scene generation is deterministic and seed-sensitive", "[sim]") {
    Tensor rgb_a, inv_a, rgb_b, inv_b;
    generate_scene(17, 32, 32, rgb_a, inv_a);
    generate_scene(17, 32, 32, rgb_b, inv_b);
    REQUIRE(bit_equal(rgb_a, rgb_b));
    REQUIRE(bit_equal(inv_a, inv_b));

    Tensor rgb_c, inv_c;
    generate_scene(18, 32, 32, rgb_c, inv_c);
    REQUIRE_FALSE(bit_equal(inv_a, inv_c));
}

TEST_CASE("scene maps stay inside their documented ranges", "[sim]") {
    for (std::uint64_t seed : {2ull, 31ull, 97ull}) {
        Tensor rgb, invdepth;
        generate_scene(seed, 48, 40, rgb, invdepth);
        for (std::int64_t i = 0; i < invdepth.numel(); ++i) {
            const Real v = invdepth[i];
            REQUIRE(v >= 0.02);
            REQUIRE(v <= 1.0);
            // Backgrounds live in [0.02, 0.25] and rectangles in [0.3, 1.0]:
            // nothing should fall in the gap between the two bands.
            REQUIRE((v <= 0.25 || v >= 0.3));
        }
        for (std::int64_t i = 0; i < rgb.numel(); ++i) {
            REQUIRE(rgb[i] >= 0.0);
            REQUIRE(rgb[i] <= 1.0);
        }
    }
}

TEST_CASE("scene generation rejects tiny extents", "[sim]") {
    Tensor rgb, invdepth;
    REQUIRE_THROWS_AS(generate_scene(0, 7, 64, rgb, invdepth), std::invalid_argument);
    REQUIRE_THROWS_WITH(generate_scene(0, 64, 7, rgb, invdepth), ContainsSubstring("extents must be >= 8"));
    REQUIRE_NOTHROW(generate_scene(0, 8, 8, rgb, invdepth));
}

TEST_CASE("zero gain renders two identical in-focus views", "[sim]") {
    Tensor rgb, invdepth;
    generate_scene(3, 24, 24, rgb, invdepth);

    SimConfig sc;
    sc.height = 24;
    sc.width = 24;
    sc.disparity_gain = 0.0;
    Tensor dp_l, dp_r, mask;
    render_dp(rgb, invdepth, sc, dp_l, dp_r, mask);

    const Tensor green = green_of(rgb);
    REQUIRE(bit_equal(dp_l, green));
    REQUIRE(bit_equal(dp_r, green));
    REQUIRE(bit_equal(dp_l, dp_r));
    for (std::int64_t i = 0; i < mask.numel(); ++i) REQUIRE(mask[i] == 1.0);
}

TEST_CASE("negating the gain swaps the two views exactly", "[sim]") {
    Tensor rgb, invdepth;
    generate_scene(4, 24, 24, rgb, invdepth);

    struct Case {
        Axis axis;
        Real gain;
        bool blur;
    };
    for (const Case& c : {Case{Axis::vertical, 12.0, false}, Case{Axis::horizontal, 7.5, true}}) {
        CAPTURE(static_cast<int>(c.axis), c.gain, c.blur);
        SimConfig pos;
        pos.height = 24;
        pos.width = 24;
        pos.axis = c.axis;
        pos.disparity_gain = c.gain;
        pos.blur_with_defocus = c.blur;
        SimConfig neg = pos;
        neg.disparity_gain = -c.gain;

        Tensor pl, pr, pm, nl, nr, nm;
        render_dp(rgb, invdepth, pos, pl, pr, pm);
        render_dp(rgb, invdepth, neg, nl, nr, nm);
        REQUIRE(bit_equal(nl, pr));
        REQUIRE(bit_equal(nr, pl));
        REQUIRE(bit_equal(nm, pm));
    }
}

TEST_CASE("disparity saturates at the physical bound", "[sim]") {
    // |v - v_f| = 0.25 everywhere, so any gain of 32 or more clamps the
    // signed disparity to +-8 px and the render stops depending on the gain.
    const int h = 16, w = 16;
    const Tensor rgb = rand_tensor(3, {h, w, 3}, 0.0, 1.0);
    Tensor invdepth({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) invdepth.at3(y, x, 0) = x < w / 2 ? 0.25 : 0.75;

    SimConfig a;
    a.height = h;
    a.width = w;
    a.axis = Axis::horizontal;
    a.disparity_gain = 64.0;
    SimConfig b = a;
    b.disparity_gain = 1e9;
    SimConfig c = a;
    c.disparity_gain = 1e12;

    Tensor al, ar, am, bl, br, bm, cl, cr, cm;
    render_dp(rgb, invdepth, a, al, ar, am);
    render_dp(rgb, invdepth, b, bl, br, bm);
    render_dp(rgb, invdepth, c, cl, cr, cm);
    REQUIRE(bit_equal(al, bl));
    REQUIRE(bit_equal(ar, br));
    REQUIRE(bit_equal(am, bm));
    REQUIRE(bit_equal(bl, cl));
    REQUIRE(bit_equal(br, cr));
    REQUIRE(bit_equal(bm, cm));
}

TEST_CASE("a depth step shifts the two views in opposite directions", "[sim]") {
    // Horizontal epipolar axis over an x-ramp: rows with v = 0.375 get a
    // signed disparity of -1 px and rows with v = 0.625 get +1 px (gain 8),
    // so each half-view shifts by half a pixel the opposite way.
    const int h = 16, w = 16;
    Tensor rgb({h, w, 3}), invdepth({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) rgb.at3(y, x, c) = static_cast<Real>(x) / 16.0;
            invdepth.at3(y, x, 0) = y < h / 2 ? 0.375 : 0.625;
        }

    SimConfig sc;
    sc.height = h;
    sc.width = w;
    sc.axis = Axis::horizontal;
    sc.disparity_gain = 8.0;
    Tensor dp_l, dp_r, mask;
    render_dp(rgb, invdepth, sc, dp_l, dp_r, mask);

    const Tensor green = green_of(rgb);
    auto sample_row = [&](int y, Real sx) {
        sx = std::min(std::max(sx, 0.0), static_cast<Real>(w - 1));
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, w - 1);
        const Real tx = sx - x0;
        return (1 - tx) * green.at3(y, x0, 0) + tx * green.at3(y, x1, 0);
    };

    for (int y = 0; y < h; ++y) {
        const Real half = (y < h / 2 ? -1.0 : 1.0) / 2.0;
        for (int x = 0; x < w; ++x) {
            REQUIRE(dp_l.at3(y, x, 0) == sample_row(y, x + half));
            REQUIRE(dp_r.at3(y, x, 0) == sample_row(y, x - half));
            // One of the two warps leaves the image at each edge column.
            const Real want_mask = (x == 0 || x == w - 1) ? 0.0 : 1.0;
            REQUIRE(mask.at3(y, x, 0) == want_mask);
            if (x > 0 && x < w - 1) {
                const Real diff = dp_l.at3(y, x, 0) - dp_r.at3(y, x, 0);
                REQUIRE(diff == (y < h / 2 ? -0.0625 : 0.0625));
            }
        }
    }
}

TEST_CASE("defocus blur spares the focal plane and widens off it", "[sim]") {
    const int h = 16, w = 16;

    SECTION("sub-threshold disparity leaves the views untouched") {
        // |disparity| = 1 px everywhere -> blur radius int(1/4) = 0.
        Tensor rgb({h, w, 3}), invdepth({h, w, 1});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) rgb.at3(y, x, c) = static_cast<Real>(x) / 16.0;
                invdepth.at3(y, x, 0) = y < h / 2 ? 0.375 : 0.625;
            }
        SimConfig off;
        off.height = h;
        off.width = w;
        off.axis = Axis::horizontal;
        off.disparity_gain = 8.0;
        SimConfig on = off;
        on.blur_with_defocus = true;

        Tensor l0, r0, m0, l1, r1, m1;
        render_dp(rgb, invdepth, off, l0, r0, m0);
        render_dp(rgb, invdepth, on, l1, r1, m1);
        REQUIRE(bit_equal(l0, l1));
        REQUIRE(bit_equal(r0, r1));
        REQUIRE(bit_equal(m0, m1));
    }

    SECTION("wide disparity blurs its own region only") {
        // Left half in focus (radius 0 copies bit-for-bit), right half at
        // 6 px disparity (radius 1) over a checkerboard that box blur must
        // smooth.
        Tensor rgb({h, w, 3}), invdepth({h, w, 1});
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Real checker = static_cast<Real>((x + y) % 2);
                for (int c = 0; c < 3; ++c) rgb.at3(y, x, c) = checker;
                invdepth.at3(y, x, 0) = x < w / 2 ? 0.5 : 1.0;
            }
        SimConfig off;
        off.height = h;
        off.width = w;
        off.axis = Axis::horizontal;
        off.disparity_gain = 12.0;
        SimConfig on = off;
        on.blur_with_defocus = true;

        Tensor l0, r0, m0, l1, r1, m1;
        render_dp(rgb, invdepth, off, l0, r0, m0);
        render_dp(rgb, invdepth, on, l1, r1, m1);
        REQUIRE(bit_equal(m0, m1));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w / 2; ++x) {
                REQUIRE(l1.at3(y, x, 0) == l0.at3(y, x, 0));
                REQUIRE(r1.at3(y, x, 0) == r0.at3(y, x, 0));
            }
        bool blurred_somewhere = false;
        for (int y = 0; y < h && !blurred_somewhere; ++y)
            for (int x = w / 2; x < w && !blurred_somewhere; ++x)
                blurred_somewhere = l1.at3(y, x, 0) != l0.at3(y, x, 0);
        REQUIRE(blurred_somewhere);
    }
}

TEST_CASE("rendering validates its inputs", "[sim]") {
    SimConfig sc;
    Tensor dp_l, dp_r, mask;
    Tensor flat({4, 4});
    Tensor inv({4, 4, 1});
    REQUIRE_THROWS_AS(render_dp(flat, inv, sc, dp_l, dp_r, mask), std::invalid_argument);

    Tensor rgb({4, 4, 3});
    Tensor wrong({4, 5, 1});
    REQUIRE_THROWS_AS(render_dp(rgb, wrong, sc, dp_l, dp_r, mask), std::invalid_argument);
}

TEST_CASE("simulated samples land on the storage grid", "[sim]") {
    SimConfig sc;
    sc.height = 24;
    sc.width = 24;
    sc.seed = 5;
    const RgbDpSample s = simulate_sample(sc);

    const Tensor* maps[] = {&s.rgb, &s.dp_l, &s.dp_r, &s.invdepth, &s.mask};
    for (const Tensor* t : maps) {
        Tensor q = *t;
        quantize_f32(q);
        REQUIRE(bit_equal(q, *t));
        for (std::int64_t i = 0; i < t->numel(); ++i) {
            REQUIRE((*t)[i] >= 0.0);
            REQUIRE((*t)[i] <= 1.0);
        }
    }
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) REQUIRE((s.mask[i] == 0.0 || s.mask[i] == 1.0));
}

TEST_CASE("float maps round trip bit-exactly", "[sim][fmap]") {
    const std::string dir = scratch_dir("dpdepth_fmap_rt");
    const std::vector<std::vector<int>> shapes = {{7, 5, 3}, {64, 64, 1}, {1, 1, 1}, {3, 9, 2}};
    int idx = 0;
    for (const auto& shape : shapes) {
        Tensor t = rand_tensor(40 + idx, shape, -2.0, 2.0);
        quantize_f32(t);
        const std::string path = dir + "/map" + std::to_string(idx++) + ".fmap";
        write_fmap(path, t);
        const Tensor back = read_fmap(path);
        REQUIRE(back.dim(0) == shape[0]);
        REQUIRE(back.dim(1) == shape[1]);
        REQUIRE(back.dim(2) == shape[2]);
        REQUIRE(bit_equal(back, t));
    }
}

TEST_CASE("the map header is 17 bytes of magic, version, and extents", "[sim][fmap]") {
    const std::string dir = scratch_dir("dpdepth_fmap_hdr");

    Tensor t({2, 3, 1});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = 0.25 * static_cast<Real>(i);
    const std::string path = dir + "/small.fmap";
    write_fmap(path, t);
    const std::string buf = read_file_bytes(path);

    REQUIRE(buf.size() == 17 + 4 * 6);
    REQUIRE(buf.substr(0, 4) == "FMAP");
    REQUIRE(static_cast<int>(buf[4]) == 1);
    REQUIRE(le32(buf, 5) == 3u);   // width
    REQUIRE(le32(buf, 9) == 2u);   // height
    REQUIRE(le32(buf, 13) == 1u);  // channels
    float first;
    std::uint32_t bits = le32(buf, 17);
    std::memcpy(&first, &bits, 4);
    REQUIRE(first == 0.0f);
    bits = le32(buf, 21);
    std::memcpy(&first, &bits, 4);
    REQUIRE(first == 0.25f);

    // A 64x64 single-channel map is exactly one header plus 4096 floats.
    Tensor big({64, 64, 1});
    write_fmap(dir + "/big.fmap", big);
    REQUIRE(std::filesystem::file_size(dir + "/big.fmap") == 16401u);
}

TEST_CASE("map files reject corruption", "[sim][fmap]") {
    const std::string dir = scratch_dir("dpdepth_fmap_bad");
    Tensor t = rand_tensor(51, {4, 4, 1}, 0.0, 1.0);
    quantize_f32(t);
    const std::string good_path = dir + "/good.fmap";
    write_fmap(good_path, t);
    const std::string good = read_file_bytes(good_path);

    auto expect_error = [&](std::string bytes, const char* what) {
        const std::string path = dir + "/bad.fmap";
        write_bytes(path, bytes);
        REQUIRE_THROWS_WITH(read_fmap(path), ContainsSubstring(what));
    };

    std::string bad = good;
    bad[0] = 'X';
    expect_error(bad, "bad magic");

    bad = good;
    bad[4] = 2;
    expect_error(bad, "unsupported FMAP version 2");

    bad = good;
    bad[5] = bad[6] = bad[7] = bad[8] = 0;  // width = 0
    expect_error(bad, "dimension overflow");

    bad = good;
    for (int i = 5; i < 13; ++i) bad[i] = static_cast<char>(0xff);  // width*height overflows the cap
    expect_error(bad, "dimension overflow");

    bad = good.substr(0, good.size() - 4);
    expect_error(bad, "truncated");

    bad = good + std::string(4, '\0');
    expect_error(bad, "size mismatch");

    REQUIRE_THROWS_WITH(read_fmap(dir + "/absent.fmap"), ContainsSubstring("cannot open for reading"));
    REQUIRE_THROWS_WITH(write_fmap(dir + "/bad_rank.fmap", Tensor({4, 4})), ContainsSubstring("write_fmap"));
}

TEST_CASE("sample io validates channel counts and extents", "[sim]") {
    const std::string dir = scratch_dir("dpdepth_sample_io");
    SimConfig sc;
    sc.height = 16;
    sc.width = 16;
    sc.seed = 6;
    const RgbDpSample s = simulate_sample(sc);
    write_sample(s, dir);

    const RgbDpSample back = read_sample(dir);
    REQUIRE(bit_equal(back.rgb, s.rgb));
    REQUIRE(bit_equal(back.dp_l, s.dp_l));
    REQUIRE(bit_equal(back.dp_r, s.dp_r));
    REQUIRE(bit_equal(back.invdepth, s.invdepth));
    REQUIRE(bit_equal(back.mask, s.mask));

    write_fmap(dir + "/rgb.fmap", Tensor({16, 16, 1}));
    REQUIRE_THROWS_WITH(read_sample(dir), ContainsSubstring("rgb.fmap must have 3 channels"));
    write_fmap(dir + "/rgb.fmap", s.rgb);
    REQUIRE_NOTHROW(read_sample(dir));

    write_fmap(dir + "/dpl.fmap", Tensor({18, 16, 1}));
    REQUIRE_THROWS_WITH(read_sample(dir), ContainsSubstring("dpl.fmap extents disagree with rgb.fmap"));
}

TEST_CASE("index splits follow the 80/10/10 rule", "[sim]") {
    for (int i = 0; i < 30; ++i) {
        const std::string want = i % 10 < 8 ? "train" : (i % 10 == 8 ? "val" : "test");
        REQUIRE(split_of_index(i) == want);
    }
}

TEST_CASE("dataset generation writes samples and a split manifest", "[sim]") {
    const std::string dir = scratch_dir("dpdepth_dataset");
    SimConfig proto;
    proto.height = 32;
    proto.width = 32;

    REQUIRE_THROWS_WITH(make_dataset(0, 1, dir, proto), ContainsSubstring("n must be >= 1"));

    const std::string manifest_path = make_dataset(10, 42, dir, proto);
    REQUIRE(manifest_path == dir + "/manifest.tsv");

    std::string expected;
    for (int i = 0; i < 10; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", i);
        expected += std::string(name) + "\t" + split_of_index(i) + "\n";
    }
    REQUIRE(read_file_bytes(manifest_path) == expected);

    const std::vector<ManifestEntry> entries = read_manifest(manifest_path);
    REQUIRE(entries.size() == 10);
    for (int i = 0; i < 10; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04d", i);
        REQUIRE(entries[static_cast<size_t>(i)].dir == dir + "/" + name);
        REQUIRE(entries[static_cast<size_t>(i)].split == split_of_index(i));
    }

    // Spot-check that the stored samples really are the seeded simulations.
    SimConfig third = proto;
    third.seed = 42 + 3;
    const RgbDpSample want = simulate_sample(third);
    const RgbDpSample got = read_sample(entries[3].dir);
    REQUIRE(bit_equal(got.rgb, want.rgb));
    REQUIRE(bit_equal(got.invdepth, want.invdepth));

    // Larger runs keep the 80/10/10 proportions.
    const std::string dir20 = scratch_dir("dpdepth_dataset20");
    const std::vector<ManifestEntry> e20 = read_manifest(make_dataset(20, 7, dir20, proto));
    int n_train = 0, n_val = 0, n_test = 0;
    for (const auto& e : e20) {
        if (e.split == "train") ++n_train;
        if (e.split == "val") ++n_val;
        if (e.split == "test") ++n_test;
    }
    REQUIRE(n_train == 16);
    REQUIRE(n_val == 2);
    REQUIRE(n_test == 2);
}

TEST_CASE("dataset regeneration is byte-identical", "[sim]") {
    SimConfig proto;
    proto.height = 32;
    proto.width = 32;
    const std::string dir_a = scratch_dir("dpdepth_regen_a");
    const std::string dir_b = scratch_dir("dpdepth_regen_b");
    const std::string man_a = make_dataset(6, 9, dir_a, proto);
    const std::string man_b = make_dataset(6, 9, dir_b, proto);

    REQUIRE(read_file_bytes(man_a) == read_file_bytes(man_b));
    for (const char* rel : {"sample_0000/rgb.fmap", "sample_0003/dpl.fmap", "sample_0005/mask.fmap"})
        REQUIRE(read_file_bytes(dir_a + "/" + rel) == read_file_bytes(dir_b + "/" + rel));
}

TEST_CASE("manifest parsing reports malformed lines", "[sim]") {
    const std::string dir = scratch_dir("dpdepth_manifest");

    write_bytes(dir + "/ok.tsv", "first\ttrain\n\nsecond\tval\nthird\ttest\n");
    const std::vector<ManifestEntry> entries = read_manifest(dir + "/ok.tsv");
    REQUIRE(entries.size() == 3);
    REQUIRE(entries[0].dir == dir + "/first");
    REQUIRE(entries[0].split == "train");
    REQUIRE(entries[1].split == "val");
    REQUIRE(entries[2].split == "test");

    write_bytes(dir + "/notab.tsv", "first\ttrain\nsecond without tab\n");
    REQUIRE_THROWS_WITH(read_manifest(dir + "/notab.tsv"), ContainsSubstring(":2: missing tab separator"));

    write_bytes(dir + "/badsplit.tsv", "first\tdev\n");
    REQUIRE_THROWS_WITH(read_manifest(dir + "/badsplit.tsv"), ContainsSubstring(":1: unknown split 'dev'"));

    REQUIRE_THROWS_WITH(read_manifest(dir + "/absent.tsv"), ContainsSubstring("cannot open manifest"));
}
