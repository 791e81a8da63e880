#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/tensor.hpp"

// Differentiable ops over Graph values. Layout conventions:
//   rank-4 feature maps  (B, H, W, C)
//   rank-3 single maps   (H, W, C)
//   window stacks        (P, k, C)
// Kernels are (kh, kw, Cin, Cout); depthwise kernels (kh, kw, C). All loops
// run in a fixed order so results are bit-reproducible.

namespace dpdepth {

enum class Padding { same, valid };

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

struct ConvGeom {
    int ho = 0, wo = 0, pad_top = 0, pad_left = 0;
};

inline ConvGeom conv_geometry(int h, int w, int kh, int kw, int stride, Padding pad, const char* who) {
    if (stride < 1) throw std::invalid_argument(std::string(who) + ": stride must be positive");
    ConvGeom geo;
    if (pad == Padding::same) {
        if (kh % 2 == 0 || kw % 2 == 0)
            throw std::invalid_argument(std::string(who) + ": same padding requires odd kernel extents");
        geo.ho = (h + stride - 1) / stride;
        geo.wo = (w + stride - 1) / stride;
        const int pad_h = std::max((geo.ho - 1) * stride + kh - h, 0);
        const int pad_w = std::max((geo.wo - 1) * stride + kw - w, 0);
        geo.pad_top = pad_h / 2;
        geo.pad_left = pad_w / 2;
    } else {
        if (h < kh || w < kw)
            throw std::invalid_argument(std::string(who) + ": input " + std::to_string(h) + "x" +
                                        std::to_string(w) + " smaller than kernel " + std::to_string(kh) +
                                        "x" + std::to_string(kw) + " under valid padding");
        geo.ho = (h - kh) / stride + 1;
        geo.wo = (w - kw) / stride + 1;
    }
    return geo;
}

}  // namespace detail

// --------------------------------------------------------------- elementwise

inline Value add(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    detail::require_same_shape(ta, g.val(b), "add");
    Tensor out(ta.shape);
    const Tensor& tb = g.val(b);
    for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] + tb[i];
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(a)) {
            Tensor& ga = gg.grad(a);
            for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (gg.needs_grad(b)) {
            Tensor& gb = gg.grad(b);
            for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
        }
    });
}

inline Value sub(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    detail::require_same_shape(ta, g.val(b), "sub");
    Tensor out(ta.shape);
    const Tensor& tb = g.val(b);
    for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] - tb[i];
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(a)) {
            Tensor& ga = gg.grad(a);
            for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (gg.needs_grad(b)) {
            Tensor& gb = gg.grad(b);
            for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
        }
    });
}

inline Value mul(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    detail::require_same_shape(ta, g.val(b), "mul");
    Tensor out(ta.shape);
    const Tensor& tb = g.val(b);
    for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] * tb[i];
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& va = gg.val(a);
        const Tensor& vb = gg.val(b);
        if (gg.needs_grad(a)) {
            Tensor& ga = gg.grad(a);
            for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * vb[i];
        }
        if (gg.needs_grad(b)) {
            Tensor& gb = gg.grad(b);
            for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * va[i];
        }
    });
}

inline Value div(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    detail::require_same_shape(ta, g.val(b), "div");
    Tensor out(ta.shape);
    const Tensor& tb = g.val(b);
    for (std::int64_t i = 0; i < ta.numel(); ++i) out[i] = ta[i] / tb[i];
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& vy = gg.val(self);
        const Tensor& vb = gg.val(b);
        if (gg.needs_grad(a)) {
            Tensor& ga = gg.grad(a);
            for (std::int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / vb[i];
        }
        if (gg.needs_grad(b)) {
            Tensor& gb = gg.grad(b);
            for (std::int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i] * vy[i] / vb[i];
        }
    });
}

inline Value scale(Graph& g, Value x, Real c) {
    const Tensor& tx = g.val(x);
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = tx[i] * c;
    return g.make(std::move(out), g.needs_grad(x), [x, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * c;
    });
}

inline Value add_const(Graph& g, Value x, Real c) {
    const Tensor& tx = g.val(x);
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = tx[i] + c;
    return g.make(std::move(out), g.needs_grad(x), [x](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    });
}

/// x * s where s holds a single element.
inline Value mul_scalarv(Graph& g, Value x, Value s) {
    const Tensor& tx = g.val(x);
    const Tensor& ts = g.val(s);
    if (ts.numel() != 1) throw std::invalid_argument("mul_scalarv: scalar operand has shape " + ts.shape_str());
    Tensor out(tx.shape);
    const Real sv = ts[0];
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = tx[i] * sv;
    const bool needs = g.needs_grad(x) || g.needs_grad(s);
    return g.make(std::move(out), needs, [x, s](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Real sv = gg.val(s)[0];
        const Tensor& vx = gg.val(x);
        if (gg.needs_grad(x)) {
            Tensor& gx = gg.grad(x);
            for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * sv;
        }
        if (gg.needs_grad(s)) {
            Real acc = 0.0;
            for (std::int64_t i = 0; i < go.numel(); ++i) acc += go[i] * vx[i];
            gg.grad(s)[0] += acc;
        }
    });
}

/// x + s broadcast, s a single element.
inline Value add_scalarv(Graph& g, Value x, Value s) {
    const Tensor& tx = g.val(x);
    const Tensor& ts = g.val(s);
    if (ts.numel() != 1) throw std::invalid_argument("add_scalarv: scalar operand has shape " + ts.shape_str());
    Tensor out(tx.shape);
    const Real sv = ts[0];
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = tx[i] + sv;
    const bool needs = g.needs_grad(x) || g.needs_grad(s);
    return g.make(std::move(out), needs, [x, s](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        if (gg.needs_grad(x)) {
            Tensor& gx = gg.grad(x);
            for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
        }
        if (gg.needs_grad(s)) {
            Real acc = 0.0;
            for (std::int64_t i = 0; i < go.numel(); ++i) acc += go[i];
            gg.grad(s)[0] += acc;
        }
    });
}

/// Elementwise x * w where every extent of w equals the matching extent of x
/// or 1 (broadcast). Ranks must agree.
inline Value mul_bcast(Graph& g, Value x, Value w) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    if (tx.rank() != tw.rank())
        throw std::invalid_argument("mul_bcast: rank mismatch " + tx.shape_str() + " vs " + tw.shape_str());
    const int r = tx.rank();
    for (int i = 0; i < r; ++i)
        if (tw.dim(i) != tx.dim(i) && tw.dim(i) != 1)
            throw std::invalid_argument("mul_bcast: shape " + tw.shape_str() + " does not broadcast to " +
                                        tx.shape_str());
    // Strides of w in x's index space (0 along broadcast dims).
    std::vector<std::int64_t> ws(static_cast<size_t>(r), 0);
    std::int64_t stride = 1;
    for (int i = r - 1; i >= 0; --i) {
        ws[static_cast<size_t>(i)] = (tw.dim(i) == 1) ? 0 : stride;
        stride *= tw.dim(i);
    }
    Tensor out(tx.shape);
    // Walk x linearly, maintain the matching w offset with counters.
    {
        std::vector<int> idx(r, 0);
        std::int64_t wi = 0;
        for (std::int64_t xi = 0; xi < tx.numel(); ++xi) {
            out[xi] = tx[xi] * tw[wi];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[i] < tx.dim(i)) {
                    wi += ws[i];
                    break;
                }
                idx[i] = 0;
                wi -= ws[i] * (tx.dim(i) - 1);
            }
        }
    }
    const bool needs = g.needs_grad(x) || g.needs_grad(w);
    return g.make(std::move(out), needs, [x, w, ws, r](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& vx = gg.val(x);
        const Tensor& vw = gg.val(w);
        const bool nx = gg.needs_grad(x);
        const bool nw = gg.needs_grad(w);
        Tensor* gx = nx ? &gg.grad(x) : nullptr;
        Tensor* gw = nw ? &gg.grad(w) : nullptr;
        std::vector<int> idx(static_cast<size_t>(r), 0);
        std::int64_t wi = 0;
        for (std::int64_t xi = 0; xi < vx.numel(); ++xi) {
            if (nx) (*gx)[xi] += go[xi] * vw[wi];
            if (nw) (*gw)[wi] += go[xi] * vx[xi];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < vx.dim(i)) {
                    wi += ws[static_cast<size_t>(i)];
                    break;
                }
                idx[static_cast<size_t>(i)] = 0;
                wi -= ws[static_cast<size_t>(i)] * (vx.dim(i) - 1);
            }
        }
    });
}

inline Value abs_v(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = std::abs(tx[i]);
    return g.make(std::move(out), g.needs_grad(x), [x](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& vx = gg.val(x);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i) {
            if (vx[i] > 0.0)
                gx[i] += go[i];
            else if (vx[i] < 0.0)
                gx[i] -= go[i];
        }
    });
}

inline Value sqrt_v(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) out[i] = std::sqrt(tx[i]);
    return g.make(std::move(out), g.needs_grad(x), [x](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& vy = gg.val(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i)
            if (vy[i] > 0.0) gx[i] += go[i] * 0.5 / vy[i];
    });
}

inline Value sigmoid(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) {
        const Real v = tx[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return g.make(std::move(out), g.needs_grad(x), [x](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& vy = gg.val(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i] * vy[i] * (1.0 - vy[i]);
    });
}

/// PReLU with one slope per channel (last extent). The subgradient at exactly
/// zero takes the positive branch.
inline Value prelu(Graph& g, Value x, Value alpha) {
    const Tensor& tx = g.val(x);
    const Tensor& ta = g.val(alpha);
    const int c = tx.dim(tx.rank() - 1);
    if (ta.rank() != 1 || ta.dim(0) != c)
        throw std::invalid_argument("prelu: slope shape " + ta.shape_str() + " does not match channel count " +
                                    std::to_string(c));
    Tensor out(tx.shape);
    for (std::int64_t i = 0; i < tx.numel(); ++i) {
        const Real v = tx[i];
        out[i] = v >= 0.0 ? v : ta[i % c] * v;
    }
    const bool needs = g.needs_grad(x) || g.needs_grad(alpha);
    return g.make(std::move(out), needs, [x, alpha, c](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& vx = gg.val(x);
        const Tensor& va = gg.val(alpha);
        const bool nx = gg.needs_grad(x);
        const bool na = gg.needs_grad(alpha);
        Tensor* gx = nx ? &gg.grad(x) : nullptr;
        Tensor* ga = na ? &gg.grad(alpha) : nullptr;
        for (std::int64_t i = 0; i < go.numel(); ++i) {
            const Real v = vx[i];
            if (v >= 0.0) {
                if (nx) (*gx)[i] += go[i];
            } else {
                if (nx) (*gx)[i] += go[i] * va[i % c];
                if (na) (*ga)[i % c] += go[i] * v;
            }
        }
    });
}

/// Softmax over the last extent, computed independently per channel within
/// `groups` equal-size blocks: with last extent = groups*C, entries
/// {j*C + c : j in [0,groups)} form one softmax for each fixed c.
/// softmax over the whole last extent is groups = last extent (C = 1).
inline Value softmax_groups(Graph& g, Value x, int groups) {
    const Tensor& tx = g.val(x);
    const int last = tx.dim(tx.rank() - 1);
    if (groups < 1 || last % groups != 0)
        throw std::invalid_argument("softmax_groups: groups " + std::to_string(groups) +
                                    " does not divide last extent " + std::to_string(last));
    const int c = last / groups;
    Tensor out(tx.shape);
    const std::int64_t sites = tx.numel() / last;
    for (std::int64_t s = 0; s < sites; ++s) {
        const std::int64_t base = s * last;
        for (int ch = 0; ch < c; ++ch) {
            Real mx = tx[base + ch];
            for (int j = 1; j < groups; ++j) mx = std::max(mx, tx[base + j * c + ch]);
            Real denom = 0.0;
            for (int j = 0; j < groups; ++j) {
                const Real e = std::exp(tx[base + j * c + ch] - mx);
                out[base + j * c + ch] = e;
                denom += e;
            }
            for (int j = 0; j < groups; ++j) out[base + j * c + ch] /= denom;
        }
    }
    return g.make(std::move(out), g.needs_grad(x), [x, groups, c, last](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        const Tensor& vy = gg.val(self);
        Tensor& gx = gg.grad(x);
        const std::int64_t sites = vy.numel() / last;
        for (std::int64_t s = 0; s < sites; ++s) {
            const std::int64_t base = s * last;
            for (int ch = 0; ch < c; ++ch) {
                Real dot = 0.0;
                for (int j = 0; j < groups; ++j) {
                    const std::int64_t k = base + j * c + ch;
                    dot += go[k] * vy[k];
                }
                for (int j = 0; j < groups; ++j) {
                    const std::int64_t k = base + j * c + ch;
                    gx[k] += vy[k] * (go[k] - dot);
                }
            }
        }
    });
}

inline Value softmax_lastdim(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    return softmax_groups(g, x, tx.dim(tx.rank() - 1));
}

// ---------------------------------------------------------------- reductions

inline Value sum_all(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    Real acc = 0.0;
    for (std::int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
    return g.make(Tensor::scalar(acc), g.needs_grad(x), [x](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Real go = gg.grad(self)[0];
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += go;
    });
}

inline Value mean_all(Graph& g, Value x) {
    const std::int64_t n = g.val(x).numel();
    return scale(g, sum_all(g, x), 1.0 / static_cast<Real>(n));
}

/// Mean over H and W of a (B,H,W,C) map -> (B,1,1,C).
inline Value mean_hw(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "mean_hw");
    const int b = tx.dim(0), h = tx.dim(1), w = tx.dim(2), c = tx.dim(3);
    Tensor out({b, 1, 1, c});
    const Real inv = 1.0 / (static_cast<Real>(h) * static_cast<Real>(w));
    for (int bb = 0; bb < b; ++bb)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch) out.at4(bb, 0, 0, ch) += tx.at4(bb, y, xx, ch) * inv;
    return g.make(std::move(out), g.needs_grad(x), [x, b, h, w, c, inv](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int bb = 0; bb < b; ++bb)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int ch = 0; ch < c; ++ch) gx.at4(bb, y, xx, ch) += go.at4(bb, 0, 0, ch) * inv;
    });
}

// ------------------------------------------------------------ linear algebra

/// y[..., d] = sum_c x[..., c] * w[c, d] (+ bias[d]). Pass an invalid Value
/// for `bias` to skip it.
inline Value matmul_lastdim(Graph& g, Value x, Value w, Value bias = Value{}) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    require_rank(tw, 2, "matmul_lastdim weight");
    const int c = tx.dim(tx.rank() - 1);
    if (tw.dim(0) != c)
        throw std::invalid_argument("matmul_lastdim: input channels " + std::to_string(c) +
                                    " vs weight " + tw.shape_str());
    const int d = tw.dim(1);
    const bool has_bias = bias.valid();
    if (has_bias) {
        const Tensor& tb = g.val(bias);
        if (tb.rank() != 1 || tb.dim(0) != d)
            throw std::invalid_argument("matmul_lastdim: bias shape " + tb.shape_str() + " vs output channels " +
                                        std::to_string(d));
    }
    std::vector<int> oshape = tx.shape;
    oshape.back() = d;
    Tensor out(oshape);
    const std::int64_t rows = tx.numel() / c;
    for (std::int64_t r = 0; r < rows; ++r) {
        Real* yo = &out.data[static_cast<size_t>(r * d)];
        if (has_bias) {
            const Tensor& tb = g.val(bias);
            for (int j = 0; j < d; ++j) yo[j] = tb[j];
        }
        const Real* xi = &tx.data[static_cast<size_t>(r * c)];
        for (int i = 0; i < c; ++i) {
            const Real xv = xi[i];
            const Real* wr = &tw.data[static_cast<size_t>(i) * d];
            for (int j = 0; j < d; ++j) yo[j] += xv * wr[j];
        }
    }
    const bool needs = g.needs_grad(x) || g.needs_grad(w) || (has_bias && g.needs_grad(bias));
    return g.make(std::move(out), needs, [x, w, bias, c, d, has_bias](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& vx = gg.val(x);
        const Tensor& vw = gg.val(w);
        const std::int64_t rows = vx.numel() / c;
        const bool nx = gg.needs_grad(x);
        const bool nw = gg.needs_grad(w);
        for (std::int64_t r = 0; r < rows; ++r) {
            const Real* gyo = &go.data[static_cast<size_t>(r * d)];
            const Real* xi = &vx.data[static_cast<size_t>(r * c)];
            if (nx) {
                Real* gx = &gg.grad(x).data[static_cast<size_t>(r * c)];
                for (int i = 0; i < c; ++i) {
                    const Real* wr = &vw.data[static_cast<size_t>(i) * d];
                    Real acc = 0.0;
                    for (int j = 0; j < d; ++j) acc += gyo[j] * wr[j];
                    gx[i] += acc;
                }
            }
            if (nw) {
                Tensor& gw = gg.grad(w);
                for (int i = 0; i < c; ++i) {
                    const Real xv = xi[i];
                    Real* gwr = &gw.data[static_cast<size_t>(i) * d];
                    for (int j = 0; j < d; ++j) gwr[j] += xv * gyo[j];
                }
            }
        }
        if (has_bias && gg.needs_grad(bias)) {
            Tensor& gb = gg.grad(bias);
            for (std::int64_t r = 0; r < rows; ++r) {
                const Real* gyo = &go.data[static_cast<size_t>(r * d)];
                for (int j = 0; j < d; ++j) gb[j] += gyo[j];
            }
        }
    });
}

/// Batched matmul: (P,m,n) x (P,n,q) -> (P,m,q).
inline Value bmm_nn(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    require_rank(ta, 3, "bmm_nn lhs");
    require_rank(tb, 3, "bmm_nn rhs");
    if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(1))
        throw std::invalid_argument("bmm_nn: shape mismatch " + ta.shape_str() + " x " + tb.shape_str());
    const int p = ta.dim(0), m = ta.dim(1), n = ta.dim(2), q = tb.dim(2);
    Tensor out({p, m, q});
    for (int pp = 0; pp < p; ++pp) {
        const Real* A = &ta.data[static_cast<size_t>(pp) * m * n];
        const Real* B = &tb.data[static_cast<size_t>(pp) * n * q];
        Real* Y = &out.data[static_cast<size_t>(pp) * m * q];
        for (int i = 0; i < m; ++i)
            for (int k = 0; k < n; ++k) {
                const Real av = A[i * n + k];
                const Real* br = &B[k * q];
                Real* yr = &Y[i * q];
                for (int j = 0; j < q; ++j) yr[j] += av * br[j];
            }
    }
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b, p, m, n, q](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& va = gg.val(a);
        const Tensor& vb = gg.val(b);
        const bool na = gg.needs_grad(a);
        const bool nb = gg.needs_grad(b);
        for (int pp = 0; pp < p; ++pp) {
            const Real* A = &va.data[static_cast<size_t>(pp) * m * n];
            const Real* B = &vb.data[static_cast<size_t>(pp) * n * q];
            const Real* G = &go.data[static_cast<size_t>(pp) * m * q];
            if (na) {
                Real* GA = &gg.grad(a).data[static_cast<size_t>(pp) * m * n];
                for (int i = 0; i < m; ++i)
                    for (int k = 0; k < n; ++k) {
                        const Real* br = &B[k * q];
                        const Real* gr = &G[i * q];
                        Real acc = 0.0;
                        for (int j = 0; j < q; ++j) acc += gr[j] * br[j];
                        GA[i * n + k] += acc;
                    }
            }
            if (nb) {
                Real* GB = &gg.grad(b).data[static_cast<size_t>(pp) * n * q];
                for (int i = 0; i < m; ++i)
                    for (int k = 0; k < n; ++k) {
                        const Real av = A[i * n + k];
                        const Real* gr = &G[i * q];
                        Real* gbr = &GB[k * q];
                        for (int j = 0; j < q; ++j) gbr[j] += av * gr[j];
                    }
            }
        }
    });
}

/// Batched matmul with transposed rhs: (P,m,n) x (P,q,n) -> (P,m,q).
inline Value bmm_nt(Graph& g, Value a, Value b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    require_rank(ta, 3, "bmm_nt lhs");
    require_rank(tb, 3, "bmm_nt rhs");
    if (ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2))
        throw std::invalid_argument("bmm_nt: shape mismatch " + ta.shape_str() + " x " + tb.shape_str() + "^T");
    const int p = ta.dim(0), m = ta.dim(1), n = ta.dim(2), q = tb.dim(1);
    Tensor out({p, m, q});
    for (int pp = 0; pp < p; ++pp) {
        const Real* A = &ta.data[static_cast<size_t>(pp) * m * n];
        const Real* B = &tb.data[static_cast<size_t>(pp) * q * n];
        Real* Y = &out.data[static_cast<size_t>(pp) * m * q];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < q; ++j) {
                const Real* ar = &A[i * n];
                const Real* br = &B[j * n];
                Real acc = 0.0;
                for (int k = 0; k < n; ++k) acc += ar[k] * br[k];
                Y[i * q + j] = acc;
            }
    }
    const bool needs = g.needs_grad(a) || g.needs_grad(b);
    return g.make(std::move(out), needs, [a, b, p, m, n, q](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        const Tensor& va = gg.val(a);
        const Tensor& vb = gg.val(b);
        const bool na = gg.needs_grad(a);
        const bool nb = gg.needs_grad(b);
        for (int pp = 0; pp < p; ++pp) {
            const Real* A = &va.data[static_cast<size_t>(pp) * m * n];
            const Real* B = &vb.data[static_cast<size_t>(pp) * q * n];
            const Real* G = &go.data[static_cast<size_t>(pp) * m * q];
            if (na) {
                Real* GA = &gg.grad(a).data[static_cast<size_t>(pp) * m * n];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < q; ++j) {
                        const Real gv = G[i * q + j];
                        const Real* br = &B[j * n];
                        Real* gar = &GA[i * n];
                        for (int k = 0; k < n; ++k) gar[k] += gv * br[k];
                    }
            }
            if (nb) {
                Real* GB = &gg.grad(b).data[static_cast<size_t>(pp) * q * n];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < q; ++j) {
                        const Real gv = G[i * q + j];
                        const Real* ar = &A[i * n];
                        Real* gbr = &GB[j * n];
                        for (int k = 0; k < n; ++k) gbr[k] += gv * ar[k];
                    }
            }
        }
    });
}

/// Transpose the trailing two extents of a rank-3 tensor.
inline Value transpose_last2(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 3, "transpose_last2");
    const int p = tx.dim(0), m = tx.dim(1), n = tx.dim(2);
    Tensor out({p, n, m});
    for (int pp = 0; pp < p; ++pp)
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out.data[static_cast<size_t>((pp * n + j) * m + i)] =
                    tx.data[static_cast<size_t>((pp * m + i) * n + j)];
    return g.make(std::move(out), g.needs_grad(x), [x, p, m, n](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int pp = 0; pp < p; ++pp)
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx.data[static_cast<size_t>((pp * m + i) * n + j)] +=
                        go.data[static_cast<size_t>((pp * n + j) * m + i)];
    });
}

// ------------------------------------------------------------------- conv2d

/// 2D convolution on (B,H,W,Cin) with kernel (kh,kw,Cin,Cout) and optional
/// bias (Cout). "same" keeps ceil(H/stride); "valid" requires the input to
/// cover the kernel.
inline Value conv2d(Graph& g, Value x, Value w, Value bias, int stride, Padding pad) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    require_rank(tx, 4, "conv2d input");
    require_rank(tw, 4, "conv2d kernel");
    const int b = tx.dim(0), h = tx.dim(1), wd = tx.dim(2), ci = tx.dim(3);
    const int kh = tw.dim(0), kw = tw.dim(1), co = tw.dim(3);
    if (tw.dim(2) != ci)
        throw std::invalid_argument("conv2d: input shape " + tx.shape_str() + " has " + std::to_string(ci) +
                                    " channels but kernel " + tw.shape_str() + " expects " +
                                    std::to_string(tw.dim(2)));
    const bool has_bias = bias.valid();
    if (has_bias) {
        const Tensor& tb = g.val(bias);
        if (tb.rank() != 1 || tb.dim(0) != co)
            throw std::invalid_argument("conv2d: bias shape " + tb.shape_str() + " vs kernel " + tw.shape_str());
    }
    const detail::ConvGeom geo = detail::conv_geometry(h, wd, kh, kw, stride, pad, "conv2d");
    Tensor out({b, geo.ho, geo.wo, co});
    std::vector<Real> acc(static_cast<size_t>(co));
    for (int bb = 0; bb < b; ++bb)
        for (int oy = 0; oy < geo.ho; ++oy)
            for (int ox = 0; ox < geo.wo; ++ox) {
                if (has_bias) {
                    const Tensor& tb = g.val(bias);
                    for (int j = 0; j < co; ++j) acc[static_cast<size_t>(j)] = tb[j];
                } else {
                    std::fill(acc.begin(), acc.end(), 0.0);
                }
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - geo.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - geo.pad_left;
                        if (ix < 0 || ix >= wd) continue;
                        const Real* xp = &tx.data[static_cast<size_t>(((bb * h + iy) * wd + ix)) * ci];
                        const Real* wp = &tw.data[static_cast<size_t>((ky * kw + kx)) * ci * co];
                        for (int i = 0; i < ci; ++i) {
                            const Real xv = xp[i];
                            const Real* wr = &wp[i * co];
                            for (int j = 0; j < co; ++j) acc[static_cast<size_t>(j)] += xv * wr[j];
                        }
                    }
                }
                Real* yo = &out.data[static_cast<size_t>(((bb * geo.ho + oy) * geo.wo + ox)) * co];
                for (int j = 0; j < co; ++j) yo[j] = acc[static_cast<size_t>(j)];
            }
    const bool needs = g.needs_grad(x) || g.needs_grad(w) || (has_bias && g.needs_grad(bias));
    return g.make(std::move(out), needs,
                  [x, w, bias, stride, geo, b, h, wd, ci, kh, kw, co, has_bias](Graph& gg, Value self) {
                      const Tensor& go = gg.grad(self);
                      const Tensor& vx = gg.val(x);
                      const Tensor& vw = gg.val(w);
                      const bool nx = gg.needs_grad(x);
                      const bool nw = gg.needs_grad(w);
                      const bool nb = has_bias && gg.needs_grad(bias);
                      Tensor* gx = nx ? &gg.grad(x) : nullptr;
                      Tensor* gw = nw ? &gg.grad(w) : nullptr;
                      Tensor* gb = nb ? &gg.grad(bias) : nullptr;
                      for (int bb = 0; bb < b; ++bb)
                          for (int oy = 0; oy < geo.ho; ++oy)
                              for (int ox = 0; ox < geo.wo; ++ox) {
                                  const Real* gyo =
                                      &go.data[static_cast<size_t>(((bb * geo.ho + oy) * geo.wo + ox)) * co];
                                  if (nb)
                                      for (int j = 0; j < co; ++j) (*gb)[j] += gyo[j];
                                  for (int ky = 0; ky < kh; ++ky) {
                                      const int iy = oy * stride + ky - geo.pad_top;
                                      if (iy < 0 || iy >= h) continue;
                                      for (int kx = 0; kx < kw; ++kx) {
                                          const int ix = ox * stride + kx - geo.pad_left;
                                          if (ix < 0 || ix >= wd) continue;
                                          const std::int64_t xoff =
                                              static_cast<std::int64_t>(((bb * h + iy) * wd + ix)) * ci;
                                          const std::int64_t woff =
                                              static_cast<std::int64_t>((ky * kw + kx)) * ci * co;
                                          if (nx) {
                                              Real* gxp = &gx->data[static_cast<size_t>(xoff)];
                                              for (int i = 0; i < ci; ++i) {
                                                  const Real* wr = &vw.data[static_cast<size_t>(woff + i * co)];
                                                  Real a = 0.0;
                                                  for (int j = 0; j < co; ++j) a += gyo[j] * wr[j];
                                                  gxp[i] += a;
                                              }
                                          }
                                          if (nw) {
                                              const Real* xp = &vx.data[static_cast<size_t>(xoff)];
                                              for (int i = 0; i < ci; ++i) {
                                                  const Real xv = xp[i];
                                                  Real* gwr = &gw->data[static_cast<size_t>(woff + i * co)];
                                                  for (int j = 0; j < co; ++j) gwr[j] += xv * gyo[j];
                                              }
                                          }
                                      }
                                  }
                              }
                  });
}

/// Depthwise 2D convolution: kernel (kh,kw,C), one filter per channel.
inline Value depthwise_conv2d(Graph& g, Value x, Value w, Value bias, int stride, Padding pad) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    require_rank(tx, 4, "depthwise_conv2d input");
    require_rank(tw, 3, "depthwise_conv2d kernel");
    const int b = tx.dim(0), h = tx.dim(1), wd = tx.dim(2), c = tx.dim(3);
    const int kh = tw.dim(0), kw = tw.dim(1);
    if (tw.dim(2) != c)
        throw std::invalid_argument("depthwise_conv2d: input " + tx.shape_str() + " vs kernel " + tw.shape_str());
    const bool has_bias = bias.valid();
    if (has_bias) {
        const Tensor& tb = g.val(bias);
        if (tb.rank() != 1 || tb.dim(0) != c)
            throw std::invalid_argument("depthwise_conv2d: bias shape " + tb.shape_str() + " vs channels " +
                                        std::to_string(c));
    }
    const detail::ConvGeom geo = detail::conv_geometry(h, wd, kh, kw, stride, pad, "depthwise_conv2d");
    Tensor out({b, geo.ho, geo.wo, c});
    for (int bb = 0; bb < b; ++bb)
        for (int oy = 0; oy < geo.ho; ++oy)
            for (int ox = 0; ox < geo.wo; ++ox) {
                Real* yo = &out.data[static_cast<size_t>(((bb * geo.ho + oy) * geo.wo + ox)) * c];
                if (has_bias) {
                    const Tensor& tb = g.val(bias);
                    for (int j = 0; j < c; ++j) yo[j] = tb[j];
                }
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride + ky - geo.pad_top;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride + kx - geo.pad_left;
                        if (ix < 0 || ix >= wd) continue;
                        const Real* xp = &tx.data[static_cast<size_t>(((bb * h + iy) * wd + ix)) * c];
                        const Real* wp = &tw.data[static_cast<size_t>((ky * kw + kx)) * c];
                        for (int j = 0; j < c; ++j) yo[j] += xp[j] * wp[j];
                    }
                }
            }
    const bool needs = g.needs_grad(x) || g.needs_grad(w) || (has_bias && g.needs_grad(bias));
    return g.make(std::move(out), needs,
                  [x, w, bias, stride, geo, b, h, wd, c, kh, kw, has_bias](Graph& gg, Value self) {
                      const Tensor& go = gg.grad(self);
                      const Tensor& vx = gg.val(x);
                      const Tensor& vw = gg.val(w);
                      const bool nx = gg.needs_grad(x);
                      const bool nw = gg.needs_grad(w);
                      const bool nb = has_bias && gg.needs_grad(bias);
                      Tensor* gx = nx ? &gg.grad(x) : nullptr;
                      Tensor* gw = nw ? &gg.grad(w) : nullptr;
                      Tensor* gb = nb ? &gg.grad(bias) : nullptr;
                      for (int bb = 0; bb < b; ++bb)
                          for (int oy = 0; oy < geo.ho; ++oy)
                              for (int ox = 0; ox < geo.wo; ++ox) {
                                  const Real* gyo =
                                      &go.data[static_cast<size_t>(((bb * geo.ho + oy) * geo.wo + ox)) * c];
                                  if (nb)
                                      for (int j = 0; j < c; ++j) (*gb)[j] += gyo[j];
                                  for (int ky = 0; ky < kh; ++ky) {
                                      const int iy = oy * stride + ky - geo.pad_top;
                                      if (iy < 0 || iy >= h) continue;
                                      for (int kx = 0; kx < kw; ++kx) {
                                          const int ix = ox * stride + kx - geo.pad_left;
                                          if (ix < 0 || ix >= wd) continue;
                                          const std::int64_t xoff =
                                              static_cast<std::int64_t>(((bb * h + iy) * wd + ix)) * c;
                                          const std::int64_t woff = static_cast<std::int64_t>((ky * kw + kx)) * c;
                                          if (nx) {
                                              Real* gxp = &gx->data[static_cast<size_t>(xoff)];
                                              const Real* wp = &vw.data[static_cast<size_t>(woff)];
                                              for (int j = 0; j < c; ++j) gxp[j] += gyo[j] * wp[j];
                                          }
                                          if (nw) {
                                              Real* gwp = &gw->data[static_cast<size_t>(woff)];
                                              const Real* xp = &vx.data[static_cast<size_t>(xoff)];
                                              for (int j = 0; j < c; ++j) gwp[j] += gyo[j] * xp[j];
                                          }
                                      }
                                  }
                              }
                  });
}

// ------------------------------------------------------------------ spatial

/// Bilinear resize of (B,H,W,C) to (B,h2,w2,C), align-corners-false: source
/// coordinate = (dst + 0.5) * src/dst - 0.5, clamped to the valid range.
inline Value resize_bilinear(Graph& g, Value x, int h2, int w2) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "resize_bilinear");
    if (h2 < 1 || w2 < 1) throw std::invalid_argument("resize_bilinear: target extents must be >= 1");
    const int b = tx.dim(0), h = tx.dim(1), w = tx.dim(2), c = tx.dim(3);
    struct Tap {
        int lo, hi;
        Real t;
    };
    auto taps = [](int src, int dst) {
        std::vector<Tap> v(static_cast<size_t>(dst));
        for (int i = 0; i < dst; ++i) {
            Real s = (static_cast<Real>(i) + 0.5) * static_cast<Real>(src) / static_cast<Real>(dst) - 0.5;
            if (s < 0.0) s = 0.0;
            if (s > static_cast<Real>(src - 1)) s = static_cast<Real>(src - 1);
            const int lo = static_cast<int>(std::floor(s));
            v[static_cast<size_t>(i)] = {lo, std::min(lo + 1, src - 1), s - static_cast<Real>(lo)};
        }
        return v;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps(h, h2));
    auto tx2 = std::make_shared<std::vector<Tap>>(taps(w, w2));
    Tensor out({b, h2, w2, c});
    for (int bb = 0; bb < b; ++bb)
        for (int oy = 0; oy < h2; ++oy) {
            const Tap& py = (*ty)[static_cast<size_t>(oy)];
            for (int ox = 0; ox < w2; ++ox) {
                const Tap& px = (*tx2)[static_cast<size_t>(ox)];
                for (int ch = 0; ch < c; ++ch) {
                    const Real top = (1.0 - px.t) * tx.at4(bb, py.lo, px.lo, ch) + px.t * tx.at4(bb, py.lo, px.hi, ch);
                    const Real bot = (1.0 - px.t) * tx.at4(bb, py.hi, px.lo, ch) + px.t * tx.at4(bb, py.hi, px.hi, ch);
                    out.at4(bb, oy, ox, ch) = (1.0 - py.t) * top + py.t * bot;
                }
            }
        }
    return g.make(std::move(out), g.needs_grad(x), [x, ty, tx2, b, h2, w2, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int bb = 0; bb < b; ++bb)
            for (int oy = 0; oy < h2; ++oy) {
                const Tap& py = (*ty)[static_cast<size_t>(oy)];
                for (int ox = 0; ox < w2; ++ox) {
                    const Tap& px = (*tx2)[static_cast<size_t>(ox)];
                    for (int ch = 0; ch < c; ++ch) {
                        const Real gv = go.at4(bb, oy, ox, ch);
                        gx.at4(bb, py.lo, px.lo, ch) += gv * (1.0 - py.t) * (1.0 - px.t);
                        gx.at4(bb, py.lo, px.hi, ch) += gv * (1.0 - py.t) * px.t;
                        gx.at4(bb, py.hi, px.lo, ch) += gv * py.t * (1.0 - px.t);
                        gx.at4(bb, py.hi, px.hi, ch) += gv * py.t * px.t;
                    }
                }
            }
    });
}

/// 2x2/stride-2 average pooling of a rank-3 (H,W,C) map; trailing odd row or
/// column is dropped.
inline Value avg_pool2(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 3, "avg_pool2");
    const int h = tx.dim(0), w = tx.dim(1), c = tx.dim(2);
    const int ho = h / 2, wo = w / 2;
    if (ho < 1 || wo < 1) throw std::invalid_argument("avg_pool2: input too small " + tx.shape_str());
    Tensor out({ho, wo, c});
    for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx)
            for (int ch = 0; ch < c; ++ch)
                out.at3(y, xx, ch) = 0.25 * (tx.at3(2 * y, 2 * xx, ch) + tx.at3(2 * y, 2 * xx + 1, ch) +
                                             tx.at3(2 * y + 1, 2 * xx, ch) + tx.at3(2 * y + 1, 2 * xx + 1, ch));
    return g.make(std::move(out), g.needs_grad(x), [x, ho, wo, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    const Real gv = 0.25 * go.at3(y, xx, ch);
                    gx.at3(2 * y, 2 * xx, ch) += gv;
                    gx.at3(2 * y, 2 * xx + 1, ch) += gv;
                    gx.at3(2 * y + 1, 2 * xx, ch) += gv;
                    gx.at3(2 * y + 1, 2 * xx + 1, ch) += gv;
                }
    });
}

/// Forward difference along width: y(i,j) = x(i,j+1) - x(i,j), (H,W,C) -> (H,W-1,C).
inline Value diff_x(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 3, "diff_x");
    const int h = tx.dim(0), w = tx.dim(1), c = tx.dim(2);
    if (w < 2) throw std::invalid_argument("diff_x: width must be >= 2, got " + tx.shape_str());
    Tensor out({h, w - 1, c});
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx + 1 < w; ++xx)
            for (int ch = 0; ch < c; ++ch) out.at3(y, xx, ch) = tx.at3(y, xx + 1, ch) - tx.at3(y, xx, ch);
    return g.make(std::move(out), g.needs_grad(x), [x, h, w, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx + 1 < w; ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    const Real gv = go.at3(y, xx, ch);
                    gx.at3(y, xx + 1, ch) += gv;
                    gx.at3(y, xx, ch) -= gv;
                }
    });
}

/// Forward difference along height: (H,W,C) -> (H-1,W,C).
inline Value diff_y(Graph& g, Value x) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 3, "diff_y");
    const int h = tx.dim(0), w = tx.dim(1), c = tx.dim(2);
    if (h < 2) throw std::invalid_argument("diff_y: height must be >= 2, got " + tx.shape_str());
    Tensor out({h - 1, w, c});
    for (int y = 0; y + 1 < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            for (int ch = 0; ch < c; ++ch) out.at3(y, xx, ch) = tx.at3(y + 1, xx, ch) - tx.at3(y, xx, ch);
    return g.make(std::move(out), g.needs_grad(x), [x, h, w, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int y = 0; y + 1 < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    const Real gv = go.at3(y, xx, ch);
                    gx.at3(y + 1, xx, ch) += gv;
                    gx.at3(y, xx, ch) -= gv;
                }
    });
}

/// Zero-pad a (B,H,W,C) map at the bottom/right.
inline Value pad_hw(Graph& g, Value x, int pad_bottom, int pad_right) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "pad_hw");
    const int b = tx.dim(0), h = tx.dim(1), w = tx.dim(2), c = tx.dim(3);
    Tensor out({b, h + pad_bottom, w + pad_right, c});
    for (int bb = 0; bb < b; ++bb)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch) out.at4(bb, y, xx, ch) = tx.at4(bb, y, xx, ch);
    return g.make(std::move(out), g.needs_grad(x), [x, b, h, w, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int bb = 0; bb < b; ++bb)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int ch = 0; ch < c; ++ch) gx.at4(bb, y, xx, ch) += go.at4(bb, y, xx, ch);
    });
}

/// Crop a (B,H,W,C) map to its top-left (B,h,w,C) corner.
inline Value crop_hw(Graph& g, Value x, int h, int w) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "crop_hw");
    if (h > tx.dim(1) || w > tx.dim(2))
        throw std::invalid_argument("crop_hw: crop " + std::to_string(h) + "x" + std::to_string(w) +
                                    " exceeds input " + tx.shape_str());
    const int b = tx.dim(0), c = tx.dim(3);
    Tensor out({b, h, w, c});
    for (int bb = 0; bb < b; ++bb)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int ch = 0; ch < c; ++ch) out.at4(bb, y, xx, ch) = tx.at4(bb, y, xx, ch);
    return g.make(std::move(out), g.needs_grad(x), [x, b, h, w, c](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (int bb = 0; bb < b; ++bb)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    for (int ch = 0; ch < c; ++ch) gx.at4(bb, y, xx, ch) += go.at4(bb, y, xx, ch);
    });
}

// ------------------------------------------------------------ slicing/concat

/// Concatenate along the last extent; all leading extents must agree.
inline Value concat_channels(Graph& g, const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const Tensor& t0 = g.val(parts[0]);
    std::vector<int> lead(t0.shape.begin(), t0.shape.end() - 1);
    int total = 0;
    bool needs = false;
    std::vector<int> widths;
    for (Value p : parts) {
        const Tensor& t = g.val(p);
        std::vector<int> l(t.shape.begin(), t.shape.end() - 1);
        if (l != lead)
            throw std::invalid_argument("concat_channels: leading extents differ, " + t0.shape_str() + " vs " +
                                        t.shape_str());
        widths.push_back(t.dim(t.rank() - 1));
        total += widths.back();
        needs = needs || g.needs_grad(p);
    }
    std::vector<int> oshape = t0.shape;
    oshape.back() = total;
    Tensor out(oshape);
    const std::int64_t sites = t0.numel() / t0.dim(t0.rank() - 1);
    for (std::int64_t s = 0; s < sites; ++s) {
        Real* yo = &out.data[static_cast<size_t>(s * total)];
        int off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& t = g.val(parts[pi]);
            const int wdt = widths[pi];
            const Real* xi = &t.data[static_cast<size_t>(s * wdt)];
            for (int j = 0; j < wdt; ++j) yo[off + j] = xi[j];
            off += wdt;
        }
    }
    auto parts_copy = std::make_shared<std::vector<Value>>(parts);
    auto widths_copy = std::make_shared<std::vector<int>>(widths);
    return g.make(std::move(out), needs, [parts_copy, widths_copy, sites, total](Graph& gg, Value self) {
        const Tensor& go = gg.grad(self);
        for (std::int64_t s = 0; s < sites; ++s) {
            const Real* gyo = &go.data[static_cast<size_t>(s * total)];
            int off = 0;
            for (size_t pi = 0; pi < parts_copy->size(); ++pi) {
                const int wdt = (*widths_copy)[pi];
                const Value p = (*parts_copy)[pi];
                if (gg.needs_grad(p)) {
                    Real* gx = &gg.grad(p).data[static_cast<size_t>(s * wdt)];
                    for (int j = 0; j < wdt; ++j) gx[j] += gyo[off + j];
                }
                off += wdt;
            }
        }
    });
}

/// Slice channels [c0, c1) from the last extent.
inline Value slice_channels(Graph& g, Value x, int c0, int c1) {
    const Tensor& tx = g.val(x);
    const int c = tx.dim(tx.rank() - 1);
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw std::invalid_argument("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") invalid for " + tx.shape_str());
    std::vector<int> oshape = tx.shape;
    oshape.back() = c1 - c0;
    Tensor out(oshape);
    const std::int64_t sites = tx.numel() / c;
    const int wdt = c1 - c0;
    for (std::int64_t s = 0; s < sites; ++s)
        for (int j = 0; j < wdt; ++j)
            out.data[static_cast<size_t>(s * wdt + j)] = tx.data[static_cast<size_t>(s * c + c0 + j)];
    return g.make(std::move(out), g.needs_grad(x), [x, c, c0, wdt, sites](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t s = 0; s < sites; ++s)
            for (int j = 0; j < wdt; ++j)
                gx.data[static_cast<size_t>(s * c + c0 + j)] += go.data[static_cast<size_t>(s * wdt + j)];
    });
}

/// Extract sample b of a (B,H,W,C) map as a rank-3 (H,W,C) map.
inline Value slice_sample(Graph& g, Value x, int b) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "slice_sample");
    if (b < 0 || b >= tx.dim(0))
        throw std::invalid_argument("slice_sample: batch index " + std::to_string(b) + " out of range for " +
                                    tx.shape_str());
    const std::int64_t per = tx.numel() / tx.dim(0);
    Tensor out({tx.dim(1), tx.dim(2), tx.dim(3)});
    for (std::int64_t i = 0; i < per; ++i) out[i] = tx.data[static_cast<size_t>(b * per + i)];
    return g.make(std::move(out), g.needs_grad(x), [x, b, per](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < per; ++i) gx.data[static_cast<size_t>(b * per + i)] += go[i];
    });
}

/// Gather through a precomputed bijection: out[i] = x[idx[i]]. Used for
/// window partition/merge, which are pure index permutations.
inline Value permute_gather(Graph& g, Value x, std::vector<int> out_shape,
                            std::shared_ptr<const std::vector<std::int64_t>> idx) {
    const Tensor& tx = g.val(x);
    if (static_cast<std::int64_t>(idx->size()) != Tensor::numel_of(out_shape) ||
        static_cast<std::int64_t>(idx->size()) != tx.numel())
        throw std::invalid_argument("permute_gather: index table size does not match shapes");
    Tensor out(std::move(out_shape));
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = tx[(*idx)[static_cast<size_t>(i)]];
    return g.make(std::move(out), g.needs_grad(x), [x, idx](Graph& gg, Value self) {
        if (!gg.needs_grad(x)) return;
        const Tensor& go = gg.grad(self);
        Tensor& gx = gg.grad(x);
        for (std::int64_t i = 0; i < go.numel(); ++i) gx[(*idx)[static_cast<size_t>(i)]] += go[i];
    });
}

}  // namespace dpdepth
