#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "dpdepth/attention.hpp"
#include "dpdepth/core/gradcheck.hpp"
#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/ops.hpp"
#include "dpdepth/core/tensor.hpp"

#include "helpers.hpp"

using namespace dpdepth;
using testutil::rand_tensor;

namespace {

WbipamWeights rand_weights(Graph& g, int c, std::uint64_t seed) {
    WbipamWeights w;
    w.wq = g.constant(rand_tensor(seed + 1, {c, c}, -0.5, 0.5));
    w.wk = g.constant(rand_tensor(seed + 2, {c, c}, -0.5, 0.5));
    w.res.w1 = g.constant(rand_tensor(seed + 3, {c, 2 * c}, -0.4, 0.4));
    w.res.b1 = g.constant(rand_tensor(seed + 4, {2 * c}, -0.1, 0.1));
    w.res.alpha = g.constant(Tensor::full({2 * c}, 0.25));
    w.res.w2 = g.constant(rand_tensor(seed + 5, {2 * c, c}, -0.4, 0.4));
    w.res.b2 = g.constant(rand_tensor(seed + 6, {c}, -0.1, 0.1));
    w.post_w = g.constant(rand_tensor(seed + 7, {2 * c, c}, -0.4, 0.4));
    w.post_b = g.constant(rand_tensor(seed + 8, {c}, -0.1, 0.1));
    return w;
}

/// Projections zeroed (uniform attention), residual module reduced to the
/// identity, and a post conv that forwards the attended half unchanged.
WbipamWeights probe_weights(Graph& g, int c) {
    WbipamWeights w;
    w.wq = g.constant(Tensor::zeros({c, c}));
    w.wk = g.constant(Tensor::zeros({c, c}));
    w.res.w1 = g.constant(rand_tensor(7001, {c, c}, -0.4, 0.4));
    w.res.b1 = g.constant(rand_tensor(7002, {c}, -0.1, 0.1));
    w.res.alpha = g.constant(Tensor::full({c}, 0.25));
    w.res.w2 = g.constant(Tensor::zeros({c, c}));
    w.res.b2 = g.constant(Tensor::zeros({c}));
    Tensor eye({2 * c, c});
    for (int i = 0; i < c; ++i) eye[static_cast<std::int64_t>(i) * c + i] = 1.0;
    w.post_w = g.constant(eye);
    w.post_b = g.constant(Tensor::zeros({c}));
    return w;
}

Tensor coordinate_map(int b, int h, int w, int c) {
    Tensor t({b, h, w, c});
    for (int bb = 0; bb < b; ++bb)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch)
                    t.at4(bb, y, x, ch) = 1000.0 * bb + 100.0 * y + 10.0 * x + ch;
    return t;
}

}  // namespace

TEST_CASE("window partition strip layout") {
    // Slice p of the stack is strip o of tile (ty, tx) of sample b; entry j of
    // a strip walks the epipolar axis while o is the orthogonal offset.
    struct Case {
        int b, h, w, c, k;
    };
    for (const Case cs : {Case{1, 8, 8, 2, 4}, Case{2, 4, 4, 1, 2}, Case{1, 4, 8, 3, 4},
                          Case{1, 4, 4, 2, 1}, Case{1, 4, 4, 2, 4}}) {
        // 4x8 with k=4 exercises unequal tile counts per axis
        if (cs.h % cs.k != 0 || cs.w % cs.k != 0) continue;
        const Tensor f = coordinate_map(cs.b, cs.h, cs.w, cs.c);
        for (Axis axis : {Axis::vertical, Axis::horizontal}) {
            Graph g;
            WindowStack s = window_partition(g, g.constant(f), cs.k, axis);
            const int nty = cs.h / cs.k, ntx = cs.w / cs.k;
            REQUIRE(s.b == cs.b);
            REQUIRE(s.hf == cs.h);
            REQUIRE(s.wf == cs.w);
            REQUIRE(s.c == cs.c);
            REQUIRE(s.k == cs.k);
            const Tensor st = g.val(s.data);
            REQUIRE(st.shape == std::vector<int>{cs.b * nty * ntx * cs.k, cs.k, cs.c});
            for (int bb = 0; bb < cs.b; ++bb)
                for (int ty = 0; ty < nty; ++ty)
                    for (int tx = 0; tx < ntx; ++tx)
                        for (int o = 0; o < cs.k; ++o) {
                            const int p = ((bb * nty + ty) * ntx + tx) * cs.k + o;
                            for (int j = 0; j < cs.k; ++j)
                                for (int ch = 0; ch < cs.c; ++ch) {
                                    const int y = axis == Axis::vertical ? ty * cs.k + j : ty * cs.k + o;
                                    const int x = axis == Axis::vertical ? tx * cs.k + o : tx * cs.k + j;
                                    REQUIRE(st[(static_cast<std::int64_t>(p) * cs.k + j) * cs.c + ch] ==
                                            f.at4(bb, y, x, ch));
                                }
                        }
        }
    }
}

TEST_CASE("window merge inverts the partition") {
    for (int k : {2, 4, 8}) {
        for (Axis axis : {Axis::vertical, Axis::horizontal}) {
            const Tensor f1 = rand_tensor(800 + static_cast<std::uint64_t>(k), {1, 8, 8, 3}, -2.0, 2.0);
            const Tensor f2 = rand_tensor(900 + static_cast<std::uint64_t>(k), {2, 16, 8, 2}, -2.0, 2.0);
            Graph g;
            Value m1 = window_merge(g, window_partition(g, g.constant(f1), k, axis));
            const Tensor r1 = g.val(m1);
            Value m2 = window_merge(g, window_partition(g, g.constant(f2), k, axis));
            REQUIRE(bit_equal(r1, f1));
            REQUIRE(bit_equal(g.val(m2), f2));
        }
    }
}

TEST_CASE("partition and merge validate their inputs") {
    Graph g;
    Value bad = g.constant(Tensor::zeros({1, 6, 6, 2}));
    REQUIRE_THROWS_AS(window_partition(g, bad, 4, Axis::vertical), std::invalid_argument);
    REQUIRE_THROWS_AS(window_partition(g, bad, 0, Axis::vertical), std::invalid_argument);
    REQUIRE_THROWS_AS(window_partition(g, g.constant(Tensor::zeros({6, 6, 2})), 2, Axis::vertical),
                      std::invalid_argument);

    WindowStack s = window_partition(g, g.constant(Tensor::zeros({1, 8, 8, 2})), 4, Axis::vertical);
    s.hf = 12;  // corrupt the origin metadata
    REQUIRE_THROWS_AS(window_merge(g, s), std::invalid_argument);
}

TEST_CASE("single-site strips attend only to themselves") {
    const Tensor fl = rand_tensor(810, {5, 1, 3}, -2.0, 2.0);
    const Tensor fr = rand_tensor(811, {5, 1, 3}, -2.0, 2.0);
    Graph g;
    WbipamWeights w = probe_weights(g, 3);
    BipamOutputs out = bipam_attention(g, g.constant(fl), g.constant(fr), w);
    const Tensor a = g.val(out.att.a_lr);
    REQUIRE(a.shape == std::vector<int>{5, 1, 1});
    for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == 1.0);
    // attended value of a one-entry strip is the entry itself
    REQUIRE(bit_equal(g.val(out.fl), fl));
    REQUIRE(bit_equal(g.val(out.fr), fr));
}

TEST_CASE("zero projections attend uniformly over the strip") {
    const int P = 3, K = 4, C = 2;
    const Tensor fl = rand_tensor(820, {P, K, C}, -2.0, 2.0);
    const Tensor fr = rand_tensor(821, {P, K, C}, -2.0, 2.0);
    Graph g;
    WbipamWeights w = probe_weights(g, C);
    BipamOutputs out = bipam_attention(g, g.constant(fl), g.constant(fr), w);

    const Tensor a = g.val(out.att.a_lr);
    for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == 0.25);

    // every output row becomes the column mean of its own strip (values are
    // read from the same side as the output branch)
    const Tensor ol = g.val(out.fl);
    const Tensor orr = g.val(out.fr);
    for (int p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) {
            Real ml = 0.0, mr = 0.0;
            for (int j = 0; j < K; ++j) {
                ml += 0.25 * fl[(p * K + j) * C + c];
                mr += 0.25 * fr[(p * K + j) * C + c];
            }
            for (int j = 0; j < K; ++j) {
                REQUIRE(ol[(p * K + j) * C + c] == Catch::Approx(ml).margin(1e-15));
                REQUIRE(orr[(p * K + j) * C + c] == Catch::Approx(mr).margin(1e-15));
            }
        }
}

TEST_CASE("attention maps: stochastic rows and transposed reverse direction") {
    const int P = 4, K = 5, C = 3;
    const Tensor fl = rand_tensor(830, {P, K, C}, -2.0, 2.0);
    const Tensor fr = rand_tensor(831, {P, K, C}, -2.0, 2.0);
    Graph g;
    WbipamWeights w = rand_weights(g, C, 840);
    BipamOutputs out = bipam_attention(g, g.constant(fl), g.constant(fr), w);
    const Tensor a_lr = g.val(out.att.a_lr);
    const Tensor a_rl = g.val(out.att.a_rl);
    REQUIRE(a_lr.shape == std::vector<int>{P, K, K});
    REQUIRE(a_rl.shape == std::vector<int>{P, K, K});
    for (int p = 0; p < P; ++p)
        for (int i = 0; i < K; ++i) {
            Real row = 0.0;
            for (int j = 0; j < K; ++j) {
                const Real v = a_lr[(p * K + i) * K + j];
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
                row += v;
                // reverse map reuses the forward scores transposed, bit for bit
                REQUIRE(a_rl[(p * K + j) * K + i] == a_lr[(p * K + i) * K + j]);
            }
            REQUIRE(row == Catch::Approx(1.0).margin(1e-12));
        }
}

TEST_CASE("scaled scores divide logits by sqrt of the projection width") {
    const int P = 2, K = 3, C = 4;
    const Tensor fl = rand_tensor(850, {P, K, C}, -2.0, 2.0);
    const Tensor fr = rand_tensor(851, {P, K, C}, -2.0, 2.0);
    Graph g;
    WbipamWeights w = rand_weights(g, C, 860);
    Value vl = g.constant(fl), vr = g.constant(fr);
    BipamOutputs out = bipam_attention(g, vl, vr, w, true);
    const Tensor got = g.val(out.att.a_lr);

    Value q = matmul_lastdim(g, vl, w.wq);
    Value k = matmul_lastdim(g, vr, w.wk);
    Value want = softmax_lastdim(g, scale(g, bmm_nt(g, q, k), 1.0 / std::sqrt(4.0)));
    REQUIRE(bit_equal(got, g.val(want)));

    BipamOutputs unscaled = bipam_attention(g, vl, vr, w, false);
    REQUIRE_FALSE(bit_equal(got, g.val(unscaled.att.a_lr)));
}

TEST_CASE("module modes") {
    const int C = 8, K = 4;
    const Tensor fl = rand_tensor(870, {1, 16, 16, C}, -1.0, 1.0);
    const Tensor fr = rand_tensor(871, {1, 16, 16, C}, -1.0, 1.0);

    SECTION("shapes are preserved and maps exist exactly where a mode computes them") {
        for (WbipamMode mode : {WbipamMode::full, WbipamMode::no_window, WbipamMode::unidirectional,
                                WbipamMode::disabled}) {
            Graph g;
            WbipamWeights w = rand_weights(g, C, 880);
            Value vl = g.constant(fl), vr = g.constant(fr);
            WbipamOutputs out = wbipam_forward(g, vl, vr, K, Axis::vertical, w, mode);
            const Tensor tl = g.val(out.fl);
            const Tensor tr = g.val(out.fr);
            REQUIRE(tl.shape == fl.shape);
            REQUIRE(tr.shape == fr.shape);
            REQUIRE(tl.all_finite());
            REQUIRE(tr.all_finite());
            switch (mode) {
                case WbipamMode::full:
                case WbipamMode::no_window:
                    REQUIRE(out.att.a_lr.valid());
                    REQUIRE(out.att.a_rl.valid());
                    break;
                case WbipamMode::unidirectional:
                    REQUIRE(out.att.a_lr.valid());
                    REQUIRE_FALSE(out.att.a_rl.valid());
                    break;
                case WbipamMode::disabled:
                    REQUIRE_FALSE(out.att.a_lr.valid());
                    REQUIRE_FALSE(out.att.a_rl.valid());
                    break;
            }
            if (mode == WbipamMode::full) {
                const Tensor a = g.val(out.att.a_lr);
                REQUIRE(a.shape == std::vector<int>{1 * 4 * 4 * K, K, K});
            }
            if (mode == WbipamMode::no_window) {
                const Tensor a = g.val(out.att.a_lr);
                REQUIRE(a.shape == std::vector<int>{16, 16, 16});  // strips span the extent
            }
        }
    }

    SECTION("disabled mode hands back the very same values") {
        Graph g;
        WbipamWeights w = rand_weights(g, C, 881);
        Value vl = g.constant(fl), vr = g.constant(fr);
        WbipamOutputs out = wbipam_forward(g, vl, vr, K, Axis::vertical, w, WbipamMode::disabled);
        REQUIRE(out.fl.id == vl.id);
        REQUIRE(out.fr.id == vr.id);
        // equal inputs come back equal when attention is off
        WbipamOutputs same = wbipam_forward(g, vl, vl, K, Axis::vertical, w, WbipamMode::disabled);
        REQUIRE(same.fl.id == same.fr.id);
    }

    SECTION("unidirectional right branch is the residual-conv'd input") {
        Graph g;
        WbipamWeights w = rand_weights(g, C, 882);
        Value vl = g.constant(fl), vr = g.constant(fr);
        WbipamOutputs out =
            wbipam_forward(g, vl, vr, K, Axis::vertical, w, WbipamMode::unidirectional);
        const Tensor right = g.val(out.fr);
        const Tensor left = g.val(out.fl);

        WindowStack sr = window_partition(g, vr, K, Axis::vertical);
        sr.data = conv_module(g, sr.data, w.res);
        REQUIRE(bit_equal(right, g.val(window_merge(g, sr))));

        // left branch rebuilt from primitives: conv both sides, score left
        // queries against right keys, attend over left values, post-project
        WindowStack sl = window_partition(g, vl, K, Axis::vertical);
        WindowStack sr2 = window_partition(g, vr, K, Axis::vertical);
        Value cl = conv_module(g, sl.data, w.res);
        Value cr = conv_module(g, sr2.data, w.res);
        Value scores = softmax_lastdim(
            g, bmm_nt(g, matmul_lastdim(g, cl, w.wq), matmul_lastdim(g, cr, w.wk)));
        Value fa = bmm_nn(g, scores, cl);
        sl.data = matmul_lastdim(g, concat_channels(g, {fa, cl}), w.post_w, w.post_b);
        REQUIRE(bit_equal(left, g.val(window_merge(g, sl))));
    }

    SECTION("full mode equals partition + bipam + merge when nothing needs padding") {
        Graph g;
        WbipamWeights w = rand_weights(g, C, 883);
        Value vl = g.constant(fl), vr = g.constant(fr);
        WbipamOutputs out = wbipam_forward(g, vl, vr, K, Axis::horizontal, w, WbipamMode::full);
        const Tensor left = g.val(out.fl);
        const Tensor right = g.val(out.fr);
        const Tensor amap = g.val(out.att.a_lr);

        WindowStack sl = window_partition(g, vl, K, Axis::horizontal);
        WindowStack sr = window_partition(g, vr, K, Axis::horizontal);
        Value cl = conv_module(g, sl.data, w.res);
        Value cr = conv_module(g, sr.data, w.res);
        BipamOutputs bi = bipam_attention(g, cl, cr, w);
        sl.data = bi.fl;
        sr.data = bi.fr;
        const Tensor want_a = g.val(bi.att.a_lr);
        REQUIRE(bit_equal(amap, want_a));
        Value ml = window_merge(g, sl);
        const Tensor want_l = g.val(ml);
        Value mr = window_merge(g, sr);
        REQUIRE(bit_equal(left, want_l));
        REQUIRE(bit_equal(right, g.val(mr)));
    }

    SECTION("a window spanning the epipolar extent reproduces no-window mode") {
        const Tensor sl = rand_tensor(884, {1, 8, 8, 4}, -1.0, 1.0);
        const Tensor sr = rand_tensor(885, {1, 8, 8, 4}, -1.0, 1.0);
        Graph g;
        WbipamWeights w = rand_weights(g, 4, 886);
        Value vl = g.constant(sl), vr = g.constant(sr);
        WbipamOutputs a = wbipam_forward(g, vl, vr, 8, Axis::vertical, w, WbipamMode::full);
        const Tensor al = g.val(a.fl);
        const Tensor ar = g.val(a.fr);
        WbipamOutputs b = wbipam_forward(g, vl, vr, 3, Axis::vertical, w, WbipamMode::no_window);
        REQUIRE(bit_equal(al, g.val(b.fl)));
        REQUIRE(bit_equal(ar, g.val(b.fr)));
    }

    SECTION("extents that are no multiple of the window are padded and cropped") {
        const Tensor sl = rand_tensor(887, {1, 6, 6, 4}, -1.0, 1.0);
        const Tensor sr = rand_tensor(888, {1, 6, 6, 4}, -1.0, 1.0);
        Graph g;
        WbipamWeights w = rand_weights(g, 4, 889);
        WbipamOutputs out =
            wbipam_forward(g, g.constant(sl), g.constant(sr), 4, Axis::vertical, w, WbipamMode::full);
        const Tensor tl = g.val(out.fl);
        REQUIRE(tl.shape == std::vector<int>{1, 6, 6, 4});
        REQUIRE(g.val(out.fr).shape == std::vector<int>{1, 6, 6, 4});
        REQUIRE(tl.all_finite());
        // padded run covers two tiles per axis
        REQUIRE(g.val(out.att.a_lr).shape == std::vector<int>{1 * 2 * 2 * 4, 4, 4});
    }

    SECTION("samples in a batch do not talk to each other") {
        const Tensor bl = rand_tensor(890, {2, 8, 8, 4}, -1.0, 1.0);
        const Tensor br = rand_tensor(891, {2, 8, 8, 4}, -1.0, 1.0);
        Tensor bl_sw({2, 8, 8, 4}), br_sw({2, 8, 8, 4});
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    for (int c = 0; c < 4; ++c) {
                        bl_sw.at4(b, y, x, c) = bl.at4(1 - b, y, x, c);
                        br_sw.at4(b, y, x, c) = br.at4(1 - b, y, x, c);
                    }
        Graph g;
        WbipamWeights w = rand_weights(g, 4, 892);
        WbipamOutputs out =
            wbipam_forward(g, g.constant(bl), g.constant(br), 4, Axis::vertical, w, WbipamMode::full);
        const Tensor fl_out = g.val(out.fl);
        WbipamOutputs swapped = wbipam_forward(g, g.constant(bl_sw), g.constant(br_sw), 4,
                                               Axis::vertical, w, WbipamMode::full);
        const Tensor fl_sw_out = g.val(swapped.fl);
        REQUIRE(bit_equal(slice_sample_tensor(fl_out, 0), slice_sample_tensor(fl_sw_out, 1)));
        REQUIRE(bit_equal(slice_sample_tensor(fl_out, 1), slice_sample_tensor(fl_sw_out, 0)));
    }
}

TEST_CASE("attention gradients agree with finite differences") {
    std::vector<GradCheckInput> inputs{
        {"fl", rand_tensor(895, {2, 2, 3}, -1.0, 1.0)},
        {"fr", rand_tensor(896, {2, 2, 3}, -1.0, 1.0)},
        {"wq", rand_tensor(897, {3, 3}, -0.5, 0.5)},
        {"wk", rand_tensor(898, {3, 3}, -0.5, 0.5)},
        {"rw1", rand_tensor(899, {3, 6}, -0.4, 0.4)},
        {"rb1", rand_tensor(900, {6}, -0.1, 0.1)},
        {"ra", rand_tensor(901, {6}, 0.1, 0.4)},
        {"rw2", rand_tensor(902, {6, 3}, -0.4, 0.4)},
        {"rb2", rand_tensor(903, {3}, -0.1, 0.1)},
        {"pw", rand_tensor(904, {6, 3}, -0.4, 0.4)},
        {"pb", rand_tensor(905, {3}, -0.1, 0.1)},
    };
    auto fn = [](Graph& g, const std::vector<Value>& v) {
        WbipamWeights w;
        w.wq = v[2];
        w.wk = v[3];
        w.res = ConvModuleWeights{v[4], v[5], v[6], v[7], v[8]};
        w.post_w = v[9];
        w.post_b = v[10];
        Value cl = conv_module(g, v[0], w.res);
        Value cr = conv_module(g, v[1], w.res);
        BipamOutputs out = bipam_attention(g, cl, cr, w, true);
        return add(g, sum_all(g, out.fl), sum_all(g, out.fr));
    };
    const GradReport rep = grad_check(fn, inputs, 1e-5);
    INFO("max_rel_err=" << rep.max_rel_err << " skipped=" << rep.skipped << "/" << rep.probes);
    REQUIRE(rep.ok(1e-4));
}
