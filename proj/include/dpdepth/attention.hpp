#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dpdepth/core/blocks.hpp"
#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/ops.hpp"

// Windowed bidirectional parallax attention between the two dual-pixel
// feature maps. Feature maps are cut into k x k tiles and each tile into k
// strips of k sites along the epipolar axis; attention runs within each strip
// pair and the strips are merged back afterwards.

namespace dpdepth {

enum class Axis { vertical, horizontal };

enum class WbipamMode { full, no_window, unidirectional, disabled };

inline const char* to_string(Axis a) { return a == Axis::vertical ? "vertical" : "horizontal"; }

inline const char* to_string(WbipamMode m) {
    switch (m) {
        case WbipamMode::full: return "full";
        case WbipamMode::no_window: return "no-window";
        case WbipamMode::unidirectional: return "unidirectional";
        default: return "disabled";
    }
}

/// A partitioned feature map: data is (P, k, C) with
/// P = B * (H_f/k) * (W_f/k) * k, plus the metadata needed to merge back.
struct WindowStack {
    Value data;
    int b = 0, hf = 0, wf = 0, c = 0, k = 0;
    Axis axis = Axis::vertical;
};

namespace detail {

/// Index tables mapping stack entries to map entries and back. Slice p of the
/// stack is strip o of tile (ty, tx) of sample b, with
/// p = ((b * (H_f/k) + ty) * (W_f/k) + tx) * k + o; entry j of a strip walks
/// the epipolar axis while o is the orthogonal coordinate inside the tile.
struct WindowTables {
    std::shared_ptr<std::vector<std::int64_t>> to_stack;  // stack[i] = map[to_stack[i]]
    std::shared_ptr<std::vector<std::int64_t>> to_map;    // map[i]   = stack[to_map[i]]
    int p = 0;
};

inline WindowTables window_tables(int b, int hf, int wf, int c, int k, Axis axis) {
    if (k < 1) throw std::invalid_argument("window_partition: k must be >= 1, got " + std::to_string(k));
    if (hf % k != 0 || wf % k != 0)
        throw std::invalid_argument("window_partition: extents " + std::to_string(hf) + "x" + std::to_string(wf) +
                                    " not divisible by k=" + std::to_string(k));
    const int nty = hf / k, ntx = wf / k;
    const std::int64_t n = static_cast<std::int64_t>(b) * hf * wf * c;
    WindowTables t;
    t.p = b * nty * ntx * k;
    t.to_stack = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(n));
    t.to_map = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(n));
    std::int64_t si = 0;
    for (int bb = 0; bb < b; ++bb)
        for (int ty = 0; ty < nty; ++ty)
            for (int tx = 0; tx < ntx; ++tx)
                for (int o = 0; o < k; ++o)
                    for (int j = 0; j < k; ++j) {
                        const int y = axis == Axis::vertical ? ty * k + j : ty * k + o;
                        const int x = axis == Axis::vertical ? tx * k + o : tx * k + j;
                        const std::int64_t mbase =
                            (static_cast<std::int64_t>((bb * hf + y)) * wf + x) * c;
                        for (int ch = 0; ch < c; ++ch, ++si) {
                            (*t.to_stack)[static_cast<size_t>(si)] = mbase + ch;
                            (*t.to_map)[static_cast<size_t>(mbase + ch)] = si;
                        }
                    }
    return t;
}

}  // namespace detail

inline WindowStack window_partition(Graph& g, Value f, int k, Axis axis) {
    const Tensor& tf = g.val(f);
    require_rank(tf, 4, "window_partition");
    WindowStack s;
    s.b = tf.dim(0);
    s.hf = tf.dim(1);
    s.wf = tf.dim(2);
    s.c = tf.dim(3);
    s.k = k;
    s.axis = axis;
    const detail::WindowTables t = detail::window_tables(s.b, s.hf, s.wf, s.c, k, axis);
    s.data = permute_gather(g, f, {t.p, k, s.c}, t.to_stack);
    return s;
}

inline Value window_merge(Graph& g, const WindowStack& s) {
    const Tensor& td = g.val(s.data);
    require_rank(td, 3, "window_merge");
    if (s.k < 1 || s.hf % s.k != 0 || s.wf % s.k != 0 ||
        td.dim(0) != s.b * (s.hf / s.k) * (s.wf / s.k) * s.k || td.dim(1) != s.k || td.dim(2) != s.c)
        throw std::invalid_argument("window_merge: stack " + td.shape_str() +
                                    " inconsistent with origin metadata b=" + std::to_string(s.b) + " hf=" +
                                    std::to_string(s.hf) + " wf=" + std::to_string(s.wf) + " c=" +
                                    std::to_string(s.c) + " k=" + std::to_string(s.k));
    const detail::WindowTables t = detail::window_tables(s.b, s.hf, s.wf, s.c, s.k, s.axis);
    return permute_gather(g, s.data, {s.b, s.hf, s.wf, s.c}, t.to_map);
}

/// Learnable state of one attention module. The residual conv module and the
/// post-concat 1x1 conv (2C -> C) are shared between the two branches.
struct WbipamWeights {
    Value wq, wk;            // (C, C') projections
    ConvModuleWeights res;   // residual conv module applied before attention
    Value post_w, post_b;    // (2C, C) conv after concat(attended, input)
};

struct AttentionMaps {
    Value a_lr, a_rl;  // (P, k, k); a_rl is the per-window transpose of a_lr
};

struct BipamOutputs {
    Value fl, fr;  // (P, k, C)
    AttentionMaps att;
};

namespace detail {

inline Value attention_scores(Graph& g, Value fl, Value fr, const WbipamWeights& w, bool scaled) {
    Value q = matmul_lastdim(g, fl, w.wq);
    Value k = matmul_lastdim(g, fr, w.wk);
    Value scores = bmm_nt(g, q, k);
    if (scaled) {
        const int cp = g.val(w.wq).dim(1);
        scores = scale(g, scores, 1.0 / std::sqrt(static_cast<Real>(cp)));
    }
    return softmax_lastdim(g, scores);
}

}  // namespace detail

/// Cross-attention between matched window stacks. Both inputs must already
/// have passed the residual conv module. Scores use query projections of the
/// left stack against key projections of the right; attended values are read
/// from the same side as the output branch, and the right branch reuses the
/// transposed left scores rather than recomputing a softmax (so its rows are
/// not normalized).
inline BipamOutputs bipam_attention(Graph& g, Value fl, Value fr, const WbipamWeights& w,
                                    bool scaled = false) {
    detail::require_same_shape(g.val(fl), g.val(fr), "bipam_attention");
    require_rank(g.val(fl), 3, "bipam_attention");
    BipamOutputs out;
    out.att.a_lr = detail::attention_scores(g, fl, fr, w, scaled);
    out.att.a_rl = transpose_last2(g, out.att.a_lr);
    Value fa_l = bmm_nn(g, out.att.a_lr, fl);
    Value fa_r = bmm_nn(g, out.att.a_rl, fr);
    out.fl = matmul_lastdim(g, concat_channels(g, {fa_l, fl}), w.post_w, w.post_b);
    out.fr = matmul_lastdim(g, concat_channels(g, {fa_r, fr}), w.post_w, w.post_b);
    return out;
}

struct WbipamOutputs {
    Value fl, fr;       // (B, H_f, W_f, C)
    AttentionMaps att;  // invalid Values when the mode skips attention
};

/// Full module: pad to a multiple of the window size, partition, residual
/// conv, attention, merge, crop. Modes:
///   full           window size k as given
///   no-window      k spans the whole epipolar extent
///   unidirectional only the left branch is attended; the right output is the
///                  residual-conv'd input
///   disabled       identity on both inputs
inline WbipamOutputs wbipam_forward(Graph& g, Value fl, Value fr, int k, Axis axis,
                                    const WbipamWeights& w, WbipamMode mode, bool scaled = false) {
    detail::require_same_shape(g.val(fl), g.val(fr), "wbipam_forward");
    require_rank(g.val(fl), 4, "wbipam_forward");
    WbipamOutputs out;
    if (mode == WbipamMode::disabled) {
        out.fl = fl;
        out.fr = fr;
        return out;
    }
    const Tensor& tf = g.val(fl);
    const int hf = tf.dim(1), wf = tf.dim(2);
    const int ke = mode == WbipamMode::no_window ? (axis == Axis::vertical ? hf : wf) : k;
    if (ke < 1) throw std::invalid_argument("wbipam_forward: window size must be >= 1");
    const int hp = (hf + ke - 1) / ke * ke;
    const int wp = (wf + ke - 1) / ke * ke;
    Value pl = fl, pr = fr;
    if (hp != hf || wp != wf) {
        pl = pad_hw(g, fl, hp - hf, wp - wf);
        pr = pad_hw(g, fr, hp - hf, wp - wf);
    }
    WindowStack sl = window_partition(g, pl, ke, axis);
    WindowStack sr = window_partition(g, pr, ke, axis);
    Value cl = conv_module(g, sl.data, w.res);
    Value cr = conv_module(g, sr.data, w.res);
    if (mode == WbipamMode::unidirectional) {
        Value scores = detail::attention_scores(g, cl, cr, w, scaled);
        out.att.a_lr = scores;
        Value fa_l = bmm_nn(g, scores, cl);
        sl.data = matmul_lastdim(g, concat_channels(g, {fa_l, cl}), w.post_w, w.post_b);
        sr.data = cr;
    } else {
        BipamOutputs bi = bipam_attention(g, cl, cr, w, scaled);
        out.att = bi.att;
        sl.data = bi.fl;
        sr.data = bi.fr;
    }
    Value ml = window_merge(g, sl);
    Value mr = window_merge(g, sr);
    if (hp != hf || wp != wf) {
        ml = crop_hw(g, ml, hf, wf);
        mr = crop_hw(g, mr, hf, wf);
    }
    out.fl = ml;
    out.fr = mr;
    return out;
}

}  // namespace dpdepth
