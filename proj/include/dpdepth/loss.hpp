#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/ops.hpp"
#include "dpdepth/core/tensor.hpp"

// Affine-invariant training loss on inverse depth: per-image least-squares
// scale-and-shift alignment, masked mean absolute error, and a multi-scale
// gradient matching term. Plain (tensor-in, scalar-out) versions serve the
// metrics; graph versions differentiate through the alignment itself.

namespace dpdepth {

struct AffineFit {
    Real a = 0.0;
    Real b = 0.0;
};

struct LossConfig {
    Real lambda = 30.0;  // weight of the gradient matching term
    int grad_scales = 4;
};

namespace detail {

// Prediction variance below this is treated as constant; the fit then
// degenerates to a = 0, b = masked mean of the target, which keeps the loss
// finite and penalizes constant predictions by the target's spread.
inline constexpr Real kDegenerateVar = 1e-12;

struct MaskedMoments {
    Real n = 0.0;                       // number of valid pixels
    Real mean_p = 0.0, mean_t = 0.0;
    Real var_p = 0.0, cov = 0.0;
};

inline MaskedMoments masked_moments(const Tensor& pred, const Tensor& target, const Tensor& mask,
                                    const char* who) {
    require_shape(target, pred.shape, who);
    require_shape(mask, pred.shape, who);
    MaskedMoments m;
    Real sp = 0.0, st = 0.0, spp = 0.0, spt = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const Real w = mask[i];
        m.n += w;
        sp += w * pred[i];
        st += w * target[i];
        spp += w * pred[i] * pred[i];
        spt += w * pred[i] * target[i];
    }
    if (m.n <= 0.0) throw std::invalid_argument(std::string(who) + ": empty mask");
    m.mean_p = sp / m.n;
    m.mean_t = st / m.n;
    m.var_p = spp / m.n - m.mean_p * m.mean_p;
    m.cov = spt / m.n - m.mean_p * m.mean_t;
    return m;
}

/// Logical-and 2x2 pooling of a {0,1} mask; trailing odd row/column dropped
/// to match avg_pool2.
inline Tensor and_pool2(const Tensor& mask) {
    require_rank(mask, 3, "and_pool2");
    const int h = mask.dim(0) / 2, w = mask.dim(1) / 2, c = mask.dim(2);
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.at3(y, x, ch) = (mask.at3(2 * y, 2 * x, ch) != 0.0 && mask.at3(2 * y, 2 * x + 1, ch) != 0.0 &&
                                     mask.at3(2 * y + 1, 2 * x, ch) != 0.0 && mask.at3(2 * y + 1, 2 * x + 1, ch) != 0.0)
                                        ? 1.0
                                        : 0.0;
    return out;
}

/// Plain average 2x2 pooling (deep-supervision targets).
inline Tensor avg_pool2_plain(const Tensor& x) {
    require_rank(x, 3, "avg_pool2_plain");
    const int h = x.dim(0) / 2, w = x.dim(1) / 2, c = x.dim(2);
    Tensor out({h, w, c});
    for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2)
            for (int ch = 0; ch < c; ++ch)
                out.at3(y, x2, ch) = 0.25 * (x.at3(2 * y, 2 * x2, ch) + x.at3(2 * y, 2 * x2 + 1, ch) +
                                             x.at3(2 * y + 1, 2 * x2, ch) + x.at3(2 * y + 1, 2 * x2 + 1, ch));
    return out;
}

/// Forward-difference pair validity: vx(i,j) = m(i,j) AND m(i,j+1).
inline Tensor pair_mask_x(const Tensor& m) {
    const int h = m.dim(0), w = m.dim(1), c = m.dim(2);
    Tensor out({h, w - 1, c});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x + 1 < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.at3(y, x, ch) = (m.at3(y, x, ch) != 0.0 && m.at3(y, x + 1, ch) != 0.0) ? 1.0 : 0.0;
    return out;
}

inline Tensor pair_mask_y(const Tensor& m) {
    const int h = m.dim(0), w = m.dim(1), c = m.dim(2);
    Tensor out({h - 1, w, c});
    for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                out.at3(y, x, ch) = (m.at3(y, x, ch) != 0.0 && m.at3(y + 1, x, ch) != 0.0) ? 1.0 : 0.0;
    return out;
}

inline Real sum_of(const Tensor& t) {
    Real s = 0.0;
    for (std::int64_t i = 0; i < t.numel(); ++i) s += t[i];
    return s;
}

}  // namespace detail

// ------------------------------------------------------------ plain variants

/// Least-squares fit of a*pred + b to target over the mask.
inline AffineFit affine_align(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    const detail::MaskedMoments m = detail::masked_moments(pred, target, mask, "affine_align");
    AffineFit fit;
    if (m.var_p < detail::kDegenerateVar) {
        fit.a = 0.0;
        fit.b = m.mean_t;
    } else {
        fit.a = m.cov / m.var_p;
        fit.b = m.mean_t - fit.a * m.mean_p;
    }
    return fit;
}

/// Masked mean |a*pred + b - target| with the least-squares fit.
inline Real si_mae(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    const detail::MaskedMoments m = detail::masked_moments(pred, target, mask, "si_mae");
    const AffineFit fit = affine_align(pred, target, mask);
    Real acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i)
        acc += mask[i] * std::abs(fit.a * pred[i] + fit.b - target[i]);
    return acc / m.n;
}

/// Multi-scale gradient matching on the aligned residual: scale k works on
/// the residual average-pooled k times with the mask and-pooled alongside;
/// the per-scale term is the mean |forward difference| over valid pixel
/// pairs, one mean per direction, summed. Scales (or directions) without a
/// single valid pair contribute 0; the K terms are averaged.
inline Real grad_matching(const Tensor& pred, const Tensor& target, const Tensor& mask, int K) {
    if (K < 1) throw std::invalid_argument("grad_matching: K must be >= 1");
    const AffineFit fit = affine_align(pred, target, mask);
    Tensor r(pred.shape);
    for (std::int64_t i = 0; i < pred.numel(); ++i) r[i] = fit.a * pred[i] + fit.b - target[i];
    Tensor m = mask;
    Real total = 0.0;
    for (int k = 0; k < K; ++k) {
        const int h = r.dim(0), w = r.dim(1);
        Real term = 0.0;
        if (w >= 2) {
            const Tensor vx = detail::pair_mask_x(m);
            const Real nx = detail::sum_of(vx);
            if (nx > 0.0) {
                Real acc = 0.0;
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x + 1 < w; ++x)
                        acc += vx.at3(y, x, 0) * std::abs(r.at3(y, x + 1, 0) - r.at3(y, x, 0));
                term += acc / nx;
            }
        }
        if (h >= 2) {
            const Tensor vy = detail::pair_mask_y(m);
            const Real ny = detail::sum_of(vy);
            if (ny > 0.0) {
                Real acc = 0.0;
                for (int y = 0; y + 1 < h; ++y)
                    for (int x = 0; x < w; ++x)
                        acc += vy.at3(y, x, 0) * std::abs(r.at3(y + 1, x, 0) - r.at3(y, x, 0));
                term += acc / ny;
            }
        }
        total += term;
        if (h < 2 || w < 2) break;  // nothing left to pool; remaining scales contribute 0
        r = detail::avg_pool2_plain(r);
        m = detail::and_pool2(m);
    }
    return total / static_cast<Real>(K);
}

// ------------------------------------------------------------ graph variants

namespace detail {

struct GraphFit {
    Value a, b;   // scalar values on the tape
    Real n = 0.0;
};

/// Differentiable least-squares fit: the degenerate branch is chosen by the
/// eagerly computed prediction variance, then the selected formula is taped.
inline GraphFit affine_align_g(Graph& g, Value pred, const Tensor& target, const Tensor& mask) {
    const Tensor& tp = g.val(pred);
    const MaskedMoments mom = masked_moments(tp, target, mask, "affine_align");
    GraphFit fit;
    fit.n = mom.n;
    if (mom.var_p < kDegenerateVar) {
        fit.a = g.constant(Tensor::scalar(0.0));
        fit.b = g.constant(Tensor::scalar(mom.mean_t));
        return fit;
    }
    const Real inv_n = 1.0 / mom.n;
    Value mask_v = g.constant(mask);
    Value pm = mul(g, pred, mask_v);
    Value mean_p = scale(g, sum_all(g, pm), inv_n);
    Value var_p = sub(g, scale(g, sum_all(g, mul(g, pm, pred)), inv_n), mul(g, mean_p, mean_p));
    Value cov = sub(g, scale(g, sum_all(g, mul(g, pm, g.constant(target))), inv_n),
                    scale(g, mean_p, mom.mean_t));
    fit.a = div(g, cov, var_p);
    fit.b = sub(g, g.constant(Tensor::scalar(mom.mean_t)), mul(g, fit.a, mean_p));
    return fit;
}

inline Value aligned_residual_g(Graph& g, Value pred, const Tensor& target, const GraphFit& fit) {
    Value aligned = add_scalarv(g, mul_scalarv(g, pred, fit.a), fit.b);
    return sub(g, aligned, g.constant(target));
}

}  // namespace detail

/// Differentiable si_mae for one (H,W,1) prediction.
inline Value si_mae_g(Graph& g, Value pred, const Tensor& target, const Tensor& mask) {
    const detail::GraphFit fit = detail::affine_align_g(g, pred, target, mask);
    Value r = detail::aligned_residual_g(g, pred, target, fit);
    Value masked = mul(g, abs_v(g, r), g.constant(mask));
    return scale(g, sum_all(g, masked), 1.0 / fit.n);
}

/// Differentiable grad_matching for one (H,W,1) prediction.
inline Value grad_matching_g(Graph& g, Value pred, const Tensor& target, const Tensor& mask, int K) {
    if (K < 1) throw std::invalid_argument("grad_matching: K must be >= 1");
    const detail::GraphFit fit = detail::affine_align_g(g, pred, target, mask);
    Value r = detail::aligned_residual_g(g, pred, target, fit);
    Tensor m = mask;
    Value total = g.constant(Tensor::scalar(0.0));
    for (int k = 0; k < K; ++k) {
        const Tensor& tr = g.val(r);
        const int h = tr.dim(0), w = tr.dim(1);
        if (w >= 2) {
            const Tensor vx = detail::pair_mask_x(m);
            const Real nx = detail::sum_of(vx);
            if (nx > 0.0) {
                Value dx = mul(g, abs_v(g, diff_x(g, r)), g.constant(vx));
                total = add(g, total, scale(g, sum_all(g, dx), 1.0 / nx));
            }
        }
        if (h >= 2) {
            const Tensor vy = detail::pair_mask_y(m);
            const Real ny = detail::sum_of(vy);
            if (ny > 0.0) {
                Value dy = mul(g, abs_v(g, diff_y(g, r)), g.constant(vy));
                total = add(g, total, scale(g, sum_all(g, dy), 1.0 / ny));
            }
        }
        if (h < 2 || w < 2) break;
        r = avg_pool2(g, r);
        m = detail::and_pool2(m);
    }
    return scale(g, total, 1.0 / static_cast<Real>(K));
}

/// Per-scale loss si_mae + lambda * grad_matching for one prediction.
inline Value scale_loss_g(Graph& g, Value pred, const Tensor& target, const Tensor& mask,
                          const LossConfig& lc) {
    Value l = si_mae_g(g, pred, target, mask);
    if (lc.lambda > 0.0)
        l = add(g, l, scale(g, grad_matching_g(g, pred, target, mask, lc.grad_scales), lc.lambda));
    return l;
}

/// Deep-supervised loss for one sample: the final (H,W,1) prediction plus
/// coarse-to-fine intermediates, each scored against the target average-pooled
/// (and mask and-pooled) down to its resolution. Scales whose pooled mask has
/// no valid pixel are skipped from the equal-weight average; the full-
/// resolution mask itself must be non-empty.
inline Value total_loss_g(Graph& g, Value final_pred, const std::vector<Value>& intermediates,
                          const Tensor& target, const Tensor& mask, const LossConfig& lc) {
    require_rank(target, 3, "total_loss");
    std::vector<Value> terms;
    terms.push_back(scale_loss_g(g, final_pred, target, mask, lc));
    for (Value inter : intermediates) {
        const Tensor& ti = g.val(inter);
        require_rank(ti, 3, "total_loss intermediate");
        Tensor t = target, m = mask;
        while (t.dim(0) > ti.dim(0) || t.dim(1) > ti.dim(1)) {
            t = detail::avg_pool2_plain(t);
            m = detail::and_pool2(m);
        }
        if (t.dim(0) != ti.dim(0) || t.dim(1) != ti.dim(1))
            throw std::invalid_argument("total_loss: intermediate shape " + ti.shape_str() +
                                        " is not a power-of-two pooling of " + target.shape_str());
        if (detail::sum_of(m) <= 0.0) continue;
        terms.push_back(scale_loss_g(g, inter, t, m, lc));
    }
    Value acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = add(g, acc, terms[i]);
    return scale(g, acc, 1.0 / static_cast<Real>(terms.size()));
}

/// Batch loss: mean of per-sample deep-supervised losses. Predictions are
/// (B,H,W,1); targets and masks likewise.
inline Value total_loss_batch_g(Graph& g, Value final_pred, const std::vector<Value>& intermediates,
                                const Tensor& targets, const Tensor& masks, const LossConfig& lc) {
    require_rank(targets, 4, "total_loss_batch");
    require_rank(masks, 4, "total_loss_batch");
    const int b = g.val(final_pred).dim(0);
    Value acc;
    for (int bb = 0; bb < b; ++bb) {
        Tensor t({targets.dim(1), targets.dim(2), targets.dim(3)});
        Tensor m(t.shape);
        const std::int64_t per = t.numel();
        for (std::int64_t i = 0; i < per; ++i) {
            t[i] = targets.data[static_cast<size_t>(bb * per + i)];
            m[i] = masks.data[static_cast<size_t>(bb * per + i)];
        }
        std::vector<Value> inter_b;
        inter_b.reserve(intermediates.size());
        for (Value v : intermediates) inter_b.push_back(slice_sample(g, v, bb));
        Value sample_loss = total_loss_g(g, slice_sample(g, final_pred, bb), inter_b, t, m, lc);
        acc = bb == 0 ? sample_loss : add(g, acc, sample_loss);
    }
    return scale(g, acc, 1.0 / static_cast<Real>(b));
}

}  // namespace dpdepth
