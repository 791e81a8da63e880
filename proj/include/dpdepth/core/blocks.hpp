#pragma once

#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/ops.hpp"

// Composite building blocks. Weights are passed in explicitly; shapes are
// inferred from the weight tensors, so the same code serves every stage width.

namespace dpdepth {

/// Weights of one inverted-residual block. 1x1 convs are stored as rank-2
/// (Cin,Cout) matrices applied along the channel extent; the depthwise kernel
/// is (kh,kw,Ce).
struct IrWeights {
    Value expand_w, expand_b, expand_alpha;
    Value dw_w, dw_b, dw_alpha;
    Value project_w, project_b;
};

/// expand 1x1 -> PReLU -> depthwise 3x3 (stride s) -> PReLU -> project 1x1
/// (linear); the input is added back iff stride = 1 and Cin = Cout.
inline Value inverted_residual(Graph& g, Value x, const IrWeights& w, int stride) {
    const Tensor& tx = g.val(x);
    require_rank(tx, 4, "inverted_residual");
    const int cin = tx.dim(3);
    const int cout = g.val(w.project_w).dim(1);
    Value h = matmul_lastdim(g, x, w.expand_w, w.expand_b);
    h = prelu(g, h, w.expand_alpha);
    h = depthwise_conv2d(g, h, w.dw_w, w.dw_b, stride, Padding::same);
    h = prelu(g, h, w.dw_alpha);
    h = matmul_lastdim(g, h, w.project_w, w.project_b);
    if (stride == 1 && cin == cout) h = add(g, h, x);
    return h;
}

/// Weights of the residual conv module: two 1x1 convs (rank-2 matrices) with
/// a PReLU between them.
struct ConvModuleWeights {
    Value w1, b1, alpha;
    Value w2, b2;
};

/// x + W2 . prelu(W1 . x); works on any rank since the convs act on the last
/// extent only.
inline Value conv_module(Graph& g, Value x, const ConvModuleWeights& w) {
    Value h = matmul_lastdim(g, x, w.w1, w.b1);
    h = prelu(g, h, w.alpha);
    h = matmul_lastdim(g, h, w.w2, w.b2);
    return add(g, x, h);
}

}  // namespace dpdepth
