#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpdepth/attention.hpp"
#include "dpdepth/core/blocks.hpp"
#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/ops.hpp"
#include "dpdepth/core/rng.hpp"
#include "dpdepth/core/tensor.hpp"

// The depth network: a six-stage inverted-residual RGB encoder, a siamese
// dual-pixel encoder with per-block parallax attention, a three-source fusion
// module at the fused strides, and a UNet-style decoder with deep
// supervision. Three wirings share the building blocks: dp_only (DP encoder +
// a discardable bridge ladder + decoder), rgb_only (RGB encoder + decoder),
// and full (everything, fused features replacing the shallow skips).

namespace dpdepth {

enum class FusionMode { feature_wise, pixel_wise, channel_wise, concat_only };
enum class FusionNorm { softmax, none };
enum class ModelKind { dp_only, rgb_only, full };

inline const char* to_string(FusionMode m) {
    switch (m) {
        case FusionMode::feature_wise: return "feature-wise";
        case FusionMode::pixel_wise: return "pixel-wise";
        case FusionMode::channel_wise: return "channel-wise";
        default: return "concat-only";
    }
}

inline const char* to_string(FusionNorm n) { return n == FusionNorm::softmax ? "softmax" : "none"; }

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::dp_only: return "dp_only";
        case ModelKind::rgb_only: return "rgb_only";
        default: return "full";
    }
}

// Expansion factor of every inverted-residual block.
inline constexpr int kIrExpansion = 4;
// Number of RGB encoder stages (strides 2,4,8,16,32,64) and decoder depth.
inline constexpr int kNumStages = 6;

/// Stage widths {base, 1.5*base, 2*base, 3*base, 4*base, 5*base}.
inline std::vector<int> default_rgb_channels(int base) {
    return {base, base * 3 / 2, base * 2, base * 3, base * 4, base * 5};
}

struct ModelConfig {
    int height = 64, width = 64;
    int base_channels = 16;
    std::vector<int> rgb_channels = default_rgb_channels(16);  // strides 2..64
    int dp_depth = 2;                                          // DP encoder blocks (1..5)
    int window_k = 4;
    Axis axis = Axis::vertical;
    WbipamMode wbipam_mode = WbipamMode::full;
    bool scaled_attention = false;  // 1/sqrt(C') factor on attention scores
    FusionMode fusion_mode = FusionMode::feature_wise;
    FusionNorm fusion_norm = FusionNorm::softmax;
    bool deep_supervision = true;
    std::uint64_t seed = 0;

    void validate() const {
        // Six stride-2 stages: extents must survive five exact halvings (the
        // deepest stage may bottom out at 1x1 under ceil division).
        if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0)
            throw std::invalid_argument("model config: input extents must be positive multiples of 32, got " +
                                        std::to_string(height) + "x" + std::to_string(width));
        if (base_channels < 2)
            throw std::invalid_argument("model config: base_channels must be >= 2");
        if (static_cast<int>(rgb_channels.size()) != kNumStages)
            throw std::invalid_argument("model config: rgb_channels must list " + std::to_string(kNumStages) +
                                        " stage widths, got " + std::to_string(rgb_channels.size()));
        for (int c : rgb_channels)
            if (c < 2) throw std::invalid_argument("model config: every stage width must be >= 2");
        if (dp_depth < 1 || dp_depth > 5)
            throw std::invalid_argument("model config: dp_depth must be in [1,5], got " +
                                        std::to_string(dp_depth));
        if (window_k < 1) throw std::invalid_argument("model config: window_k must be >= 1");
    }

    /// Decoder channel width after block j (1-based): halves each block,
    /// floored at 8 so the full-resolution block keeps enough capacity to
    /// draw sharp boundaries.
    int decoder_channels(int j) const {
        int c = rgb_channels[kNumStages - 1];
        for (int i = 0; i < j; ++i) c = std::max(c / 2, 8);
        return c;
    }
};

// --------------------------------------------------------------- parameters

struct Param {
    std::string name;
    Tensor value;
    Tensor m, v;  // Adam moment estimates
};

/// Ordered, uniquely named parameter tensors plus optimizer moments.
class ParamSet {
public:
    int add(const std::string& name, Tensor value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_.emplace(name, static_cast<int>(params_.size()));
        Param p;
        p.name = name;
        p.m = Tensor::zeros(value.shape);
        p.v = Tensor::zeros(value.shape);
        p.value = std::move(value);
        params_.push_back(std::move(p));
        return static_cast<int>(params_.size()) - 1;
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
        return params_[static_cast<size_t>(it->second)];
    }
    const Param& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
        return params_[static_cast<size_t>(it->second)];
    }
    size_t size() const { return params_.size(); }
    Param& operator[](size_t i) { return params_[i]; }
    const Param& operator[](size_t i) const { return params_[i]; }
    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, int> index_;
};

namespace detail {

/// Every tensor draws from its own stream seeded by (model seed XOR name
/// hash), so a parameter's initial value does not depend on what else the
/// model contains — subset builds reproduce identical tensors.
inline Rng param_rng(std::uint64_t seed, const std::string& name) { return Rng(seed ^ fnv1a64(name)); }

inline void add_weight(ParamSet& ps, std::uint64_t seed, const std::string& name, std::vector<int> shape,
                       int fan_in) {
    Rng rng = param_rng(seed, name);
    Tensor t(std::move(shape));
    const Real sd = std::sqrt(2.0 / static_cast<Real>(fan_in));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * sd;
    quantize_f32(t);
    ps.add(name, std::move(t));
}

inline void add_bias(ParamSet& ps, const std::string& name, int n) { ps.add(name, Tensor::zeros({n})); }

inline void add_alpha(ParamSet& ps, const std::string& name, int n) { ps.add(name, Tensor::full({n}, 0.25)); }

inline void declare_ir(ParamSet& ps, std::uint64_t seed, const std::string& prefix, int cin, int cout) {
    const int ce = cin * kIrExpansion;
    add_weight(ps, seed, prefix + "expand_w", {cin, ce}, cin);
    add_bias(ps, prefix + "expand_b", ce);
    add_alpha(ps, prefix + "expand_alpha", ce);
    add_weight(ps, seed, prefix + "dw_w", {3, 3, ce}, 9);
    add_bias(ps, prefix + "dw_b", ce);
    add_alpha(ps, prefix + "dw_alpha", ce);
    add_weight(ps, seed, prefix + "project_w", {ce, cout}, ce);
    add_bias(ps, prefix + "project_b", cout);
}

inline void declare_att(ParamSet& ps, std::uint64_t seed, const std::string& prefix, int c) {
    add_weight(ps, seed, prefix + "wq", {c, c}, c);
    add_weight(ps, seed, prefix + "wk", {c, c}, c);
    add_weight(ps, seed, prefix + "res_w1", {c, c}, c);
    add_bias(ps, prefix + "res_b1", c);
    add_alpha(ps, prefix + "res_alpha", c);
    add_weight(ps, seed, prefix + "res_w2", {c, c}, c);
    add_bias(ps, prefix + "res_b2", c);
    add_weight(ps, seed, prefix + "post_w", {2 * c, c}, 2 * c);
    add_bias(ps, prefix + "post_b", c);
}

inline void declare_fusion(ParamSet& ps, const ModelConfig& cfg, const std::string& prefix, int c) {
    if (cfg.fusion_mode != FusionMode::concat_only) {
        const int score_dim = cfg.fusion_mode == FusionMode::feature_wise ? 3 : 3 * c;
        add_weight(ps, cfg.seed, prefix + "score_w1", {3 * c, c}, 3 * c);
        add_bias(ps, prefix + "score_b1", c);
        add_alpha(ps, prefix + "score_alpha", c);
        add_weight(ps, cfg.seed, prefix + "score_w2", {c, score_dim}, c);
        add_bias(ps, prefix + "score_b2", score_dim);
    }
    add_weight(ps, cfg.seed, prefix + "out_w1", {3 * c, c}, 3 * c);
    add_bias(ps, prefix + "out_b1", c);
    add_alpha(ps, prefix + "out_alpha", c);
    add_weight(ps, cfg.seed, prefix + "out_w2", {c, c}, c);
    add_bias(ps, prefix + "out_b2", c);
}

inline void declare_decoder(ParamSet& ps, const ModelConfig& cfg) {
    // Six blocks mirror the six encoder strides; blocks 1..5 concatenate the
    // stride-32..2 skips, block 6 runs at full resolution without one.
    int prev = cfg.rgb_channels[kNumStages - 1];
    for (int j = 1; j <= kNumStages; ++j) {
        const std::string prefix = "decoder.block" + std::to_string(j) + ".";
        const int skip_c = j < kNumStages ? cfg.rgb_channels[kNumStages - 1 - j] : 0;
        const int out_c = cfg.decoder_channels(j);
        add_weight(ps, cfg.seed, prefix + "conv_w", {3, 3, prev + skip_c, out_c}, 9 * (prev + skip_c));
        add_bias(ps, prefix + "conv_b", out_c);
        add_alpha(ps, prefix + "conv_alpha", out_c);
        add_weight(ps, cfg.seed, prefix + "head_w", {out_c, 1}, out_c);
        add_bias(ps, prefix + "head_b", 1);
        prev = out_c;
    }
    add_weight(ps, cfg.seed, "decoder.out.w", {prev, 1}, prev);
    add_bias(ps, "decoder.out.b", 1);
}

}  // namespace detail

/// Deterministic model construction: conv weights ~ N(0, 2/fan_in), biases 0,
/// PReLU slopes 0.25, all on the f32 grid.
inline ParamSet build_model(const ModelConfig& cfg, ModelKind kind) {
    cfg.validate();
    ParamSet ps;
    if (kind == ModelKind::rgb_only || kind == ModelKind::full) {
        int cin = 3;
        for (int i = 1; i <= kNumStages; ++i) {
            detail::declare_ir(ps, cfg.seed, "rgb_encoder.stage" + std::to_string(i) + ".", cin,
                               cfg.rgb_channels[static_cast<size_t>(i - 1)]);
            cin = cfg.rgb_channels[static_cast<size_t>(i - 1)];
        }
    }
    if (kind == ModelKind::dp_only || kind == ModelKind::full) {
        int cin = 1;
        for (int i = 1; i <= cfg.dp_depth; ++i) {
            const int c = cfg.rgb_channels[static_cast<size_t>(i - 1)];
            const std::string prefix = "dp_encoder.block" + std::to_string(i) + ".";
            detail::declare_ir(ps, cfg.seed, prefix + "ir.", cin, c);
            detail::declare_att(ps, cfg.seed, prefix + "att.", c);
            cin = c;
        }
    }
    if (kind == ModelKind::dp_only) {
        // Bridge: per-block pair merge convs plus an inverted-residual ladder
        // continuing the stride doubling to 64; discarded after stage 1.
        for (int i = 1; i <= cfg.dp_depth; ++i) {
            const int c = cfg.rgb_channels[static_cast<size_t>(i - 1)];
            const std::string prefix = "bridge.merge" + std::to_string(i) + ".";
            detail::add_weight(ps, cfg.seed, prefix + "w", {2 * c, c}, 2 * c);
            detail::add_bias(ps, prefix + "b", c);
        }
        for (int i = cfg.dp_depth + 1; i <= kNumStages; ++i)
            detail::declare_ir(ps, cfg.seed, "bridge.stage" + std::to_string(i) + ".",
                               cfg.rgb_channels[static_cast<size_t>(i - 2)],
                               cfg.rgb_channels[static_cast<size_t>(i - 1)]);
    }
    if (kind == ModelKind::full) {
        for (int i = 1; i <= cfg.dp_depth; ++i)
            detail::declare_fusion(ps, cfg, "fusion.block" + std::to_string(i) + ".",
                                   cfg.rgb_channels[static_cast<size_t>(i - 1)]);
    }
    detail::declare_decoder(ps, cfg);
    return ps;
}

// ------------------------------------------------------------------ forward

/// Binds parameters into a graph as leaves, once per name, and reads
/// gradients back out after backward().
class ParamBind {
public:
    ParamBind(Graph& g, ParamSet& ps) : g_(&g), ps_(&ps) {}
    explicit ParamBind(Graph& g) : g_(&g), ps_(nullptr) {}

    Value operator[](const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        if (ps_ == nullptr) throw std::out_of_range("no binding for parameter '" + name + "'");
        Value v = g_->leaf(ps_->at(name).value);
        bound_.emplace(name, v);
        return v;
    }

    /// Pre-seed a name with an existing graph value (e.g. a grad-check leaf).
    void bind_external(const std::string& name, Value v) { bound_[name] = v; }

    bool bound(const std::string& name) const { return bound_.count(name) != 0; }

    /// Gradient of a parameter after backward(); zeros if it was never used.
    Tensor grad_of(const std::string& name) const {
        auto it = bound_.find(name);
        if (it != bound_.end()) return g_->grad(it->second);
        if (ps_ == nullptr) throw std::out_of_range("no binding for parameter '" + name + "'");
        return Tensor::zeros(ps_->at(name).value.shape);
    }

private:
    Graph* g_;
    ParamSet* ps_;
    std::unordered_map<std::string, Value> bound_;
};

struct ForwardOutputs {
    Value depth;                      // (B,H,W,1), sigmoid output in (0,1)
    std::vector<Value> intermediates; // coarse-to-fine auxiliary maps
};

namespace detail {

inline IrWeights bind_ir(ParamBind& pb, const std::string& prefix) {
    IrWeights w;
    w.expand_w = pb[prefix + "expand_w"];
    w.expand_b = pb[prefix + "expand_b"];
    w.expand_alpha = pb[prefix + "expand_alpha"];
    w.dw_w = pb[prefix + "dw_w"];
    w.dw_b = pb[prefix + "dw_b"];
    w.dw_alpha = pb[prefix + "dw_alpha"];
    w.project_w = pb[prefix + "project_w"];
    w.project_b = pb[prefix + "project_b"];
    return w;
}

inline WbipamWeights bind_att(ParamBind& pb, const std::string& prefix) {
    WbipamWeights w;
    w.wq = pb[prefix + "wq"];
    w.wk = pb[prefix + "wk"];
    w.res = {pb[prefix + "res_w1"], pb[prefix + "res_b1"], pb[prefix + "res_alpha"],
             pb[prefix + "res_w2"], pb[prefix + "res_b2"]};
    w.post_w = pb[prefix + "post_w"];
    w.post_b = pb[prefix + "post_b"];
    return w;
}

inline void require_input(const Graph& g, Value v, const ModelConfig& cfg, int channels, const char* who) {
    const Tensor& t = g.val(v);
    require_rank(t, 4, who);
    if (t.dim(1) != cfg.height || t.dim(2) != cfg.width || t.dim(3) != channels)
        throw std::invalid_argument(std::string(who) + ": expected (B," + std::to_string(cfg.height) + "," +
                                    std::to_string(cfg.width) + "," + std::to_string(channels) + "), got " +
                                    t.shape_str());
}

}  // namespace detail

/// Six stride-2 stages; returns the per-stage features (strides 2..64).
inline std::vector<Value> rgb_encoder_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, Value rgb) {
    detail::require_input(g, rgb, cfg, 3, "rgb_encoder");
    std::vector<Value> stages;
    Value x = rgb;
    for (int i = 1; i <= kNumStages; ++i) {
        x = inverted_residual(g, x, detail::bind_ir(pb, "rgb_encoder.stage" + std::to_string(i) + "."), 2);
        stages.push_back(x);
    }
    return stages;
}

struct DpBlockOutputs {
    Value fl, fr;            // (B, H/2^i, W/2^i, C_i)
    AttentionMaps att;       // invalid when the attention mode skips it
};

/// Siamese blocks: one inverted-residual extraction (shared weights on both
/// views) followed by the parallax attention module, per block.
inline std::vector<DpBlockOutputs> dp_encoder_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg,
                                                      Value il, Value ir) {
    detail::require_input(g, il, cfg, 1, "dp_encoder");
    detail::require_input(g, ir, cfg, 1, "dp_encoder");
    std::vector<DpBlockOutputs> out;
    Value xl = il, xr = ir;
    for (int i = 1; i <= cfg.dp_depth; ++i) {
        const std::string prefix = "dp_encoder.block" + std::to_string(i) + ".";
        const IrWeights irw = detail::bind_ir(pb, prefix + "ir.");
        xl = inverted_residual(g, xl, irw, 2);
        xr = inverted_residual(g, xr, irw, 2);
        const WbipamWeights aw = detail::bind_att(pb, prefix + "att.");
        WbipamOutputs wo =
            wbipam_forward(g, xl, xr, cfg.window_k, cfg.axis, aw, cfg.wbipam_mode, cfg.scaled_attention);
        xl = wo.fl;
        xr = wo.fr;
        out.push_back({xl, xr, wo.att});
    }
    return out;
}

/// Fuse the two DP features with the matching RGB feature (all (B,Hf,Wf,C)).
/// The three sources are concatenated, scored by two conv layers, weighted
/// (per the fusion mode), re-concatenated, and reduced back to C channels.
/// weights_override, when given, replaces the computed (post-normalization)
/// weights — a hook for asserting the scaling path.
inline Value fusion_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, int block, Value fl, Value fr,
                            Value fi, const Tensor* weights_override = nullptr) {
    detail::require_same_shape(g.val(fl), g.val(fr), "fusion_forward");
    detail::require_same_shape(g.val(fl), g.val(fi), "fusion_forward");
    require_rank(g.val(fl), 4, "fusion_forward");
    // Copy extents now: g.val references go stale as the graph grows.
    const int nb = g.val(fl).dim(0), nh = g.val(fl).dim(1), nw = g.val(fl).dim(2), c = g.val(fl).dim(3);
    const std::string prefix = "fusion.block" + std::to_string(block) + ".";

    auto out_conv = [&](Value x) {
        Value h = matmul_lastdim(g, x, pb[prefix + "out_w1"], pb[prefix + "out_b1"]);
        h = prelu(g, h, pb[prefix + "out_alpha"]);
        return matmul_lastdim(g, h, pb[prefix + "out_w2"], pb[prefix + "out_b2"]);
    };

    Value cat = concat_channels(g, {fl, fr, fi});
    if (cfg.fusion_mode == FusionMode::concat_only) return out_conv(cat);

    Value weights;
    if (weights_override != nullptr) {
        weights = g.constant(*weights_override);
    } else {
        Value s = matmul_lastdim(g, cat, pb[prefix + "score_w1"], pb[prefix + "score_b1"]);
        s = prelu(g, s, pb[prefix + "score_alpha"]);
        if (cfg.fusion_mode == FusionMode::channel_wise) s = mean_hw(g, s);
        Value scores = matmul_lastdim(g, s, pb[prefix + "score_w2"], pb[prefix + "score_b2"]);
        weights = cfg.fusion_norm == FusionNorm::softmax ? softmax_groups(g, scores, 3) : scores;
    }
    // Expected weight shapes per mode (scores laid out [w_l | w_r | w_i]).
    {
        std::vector<int> want;
        switch (cfg.fusion_mode) {
            case FusionMode::feature_wise: want = {nb, nh, nw, 3}; break;
            case FusionMode::pixel_wise: want = {nb, nh, nw, 3 * c}; break;
            default: want = {nb, 1, 1, 3 * c}; break;
        }
        require_shape(g.val(weights), want, "fusion weights");
    }
    Value sl, sr, si;
    if (cfg.fusion_mode == FusionMode::feature_wise) {
        sl = mul_bcast(g, fl, slice_channels(g, weights, 0, 1));
        sr = mul_bcast(g, fr, slice_channels(g, weights, 1, 2));
        si = mul_bcast(g, fi, slice_channels(g, weights, 2, 3));
    } else if (cfg.fusion_mode == FusionMode::pixel_wise) {
        sl = mul(g, fl, slice_channels(g, weights, 0, c));
        sr = mul(g, fr, slice_channels(g, weights, c, 2 * c));
        si = mul(g, fi, slice_channels(g, weights, 2 * c, 3 * c));
    } else {  // channel_wise: (B,1,1,C) weights broadcast over H, W
        sl = mul_bcast(g, fl, slice_channels(g, weights, 0, c));
        sr = mul_bcast(g, fr, slice_channels(g, weights, c, 2 * c));
        si = mul_bcast(g, fi, slice_channels(g, weights, 2 * c, 3 * c));
    }
    return out_conv(concat_channels(g, {sl, sr, si}));
}

/// Decoder: each of the six blocks doubles resolution (bilinear resize),
/// concatenates the matching encoder skip (blocks 1..5; block 6 has no
/// stride-1 counterpart), and applies a 3x3 conv + PReLU; every block feeds a
/// 1x1 sigmoid head when deep supervision is on. A final 1x1 sigmoid conv on
/// the full-resolution features emits the depth map.
inline ForwardOutputs decoder_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, Value stem,
                                      const std::vector<Value>& skips) {
    if (static_cast<int>(skips.size()) != kNumStages - 1)
        throw std::invalid_argument("decoder_forward: expected " + std::to_string(kNumStages - 1) +
                                    " skip maps, got " + std::to_string(skips.size()));
    ForwardOutputs out;
    Value x = stem;
    for (int j = 1; j <= kNumStages; ++j) {
        const std::string prefix = "decoder.block" + std::to_string(j) + ".";
        if (j < kNumStages) {
            const Value skip = skips[static_cast<size_t>(j - 1)];
            const int sh = g.val(skip).dim(1), sw = g.val(skip).dim(2);
            x = resize_bilinear(g, x, sh, sw);
            x = concat_channels(g, {x, skip});
        } else {
            x = resize_bilinear(g, x, cfg.height, cfg.width);
        }
        x = conv2d(g, x, pb[prefix + "conv_w"], pb[prefix + "conv_b"], 1, Padding::same);
        x = prelu(g, x, pb[prefix + "conv_alpha"]);
        if (cfg.deep_supervision)
            out.intermediates.push_back(
                sigmoid(g, matmul_lastdim(g, x, pb[prefix + "head_w"], pb[prefix + "head_b"])));
    }
    out.depth = sigmoid(g, matmul_lastdim(g, x, pb["decoder.out.w"], pb["decoder.out.b"]));
    return out;
}

/// RGB-only wiring (transfer stage 2): encoder features serve as skips.
inline ForwardOutputs rgb_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, Value rgb) {
    std::vector<Value> stages = rgb_encoder_forward(g, pb, cfg, rgb);
    std::vector<Value> skips;
    for (int j = kNumStages - 2; j >= 0; --j) skips.push_back(stages[static_cast<size_t>(j)]);
    return decoder_forward(g, pb, cfg, stages[kNumStages - 1], skips);
}

/// DP-only wiring (transfer stage 1): per-block left/right pairs are merged
/// by 1x1 convs into skip maps; a bridge ladder of inverted-residual blocks
/// extends the deepest merge down to stride 64 for the decoder stem.
inline ForwardOutputs dp_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, Value il, Value ir) {
    std::vector<DpBlockOutputs> blocks = dp_encoder_forward(g, pb, cfg, il, ir);
    std::vector<Value> merged;
    for (int i = 1; i <= cfg.dp_depth; ++i) {
        const std::string prefix = "bridge.merge" + std::to_string(i) + ".";
        const DpBlockOutputs& b = blocks[static_cast<size_t>(i - 1)];
        merged.push_back(matmul_lastdim(g, concat_channels(g, {b.fl, b.fr}), pb[prefix + "w"], pb[prefix + "b"]));
    }
    std::vector<Value> ladder;
    Value x = merged.back();
    for (int i = cfg.dp_depth + 1; i <= kNumStages; ++i) {
        x = inverted_residual(g, x, detail::bind_ir(pb, "bridge.stage" + std::to_string(i) + "."), 2);
        ladder.push_back(x);
    }
    std::vector<Value> skips;
    for (int s = kNumStages - 1; s >= 1; --s)
        skips.push_back(s <= cfg.dp_depth ? merged[static_cast<size_t>(s - 1)]
                                          : ladder[static_cast<size_t>(s - cfg.dp_depth - 1)]);
    return decoder_forward(g, pb, cfg, ladder.back(), skips);
}

/// Full wiring: fused features replace the RGB skips at the fused strides.
inline ForwardOutputs full_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, Value rgb, Value il,
                                   Value ir) {
    std::vector<Value> stages = rgb_encoder_forward(g, pb, cfg, rgb);
    std::vector<DpBlockOutputs> blocks = dp_encoder_forward(g, pb, cfg, il, ir);
    std::vector<Value> skips;
    for (int j = kNumStages - 2; j >= 0; --j) skips.push_back(stages[static_cast<size_t>(j)]);
    for (int i = 1; i <= cfg.dp_depth; ++i) {
        const DpBlockOutputs& b = blocks[static_cast<size_t>(i - 1)];
        Value fused = fusion_forward(g, pb, cfg, i, b.fl, b.fr, stages[static_cast<size_t>(i - 1)]);
        skips[static_cast<size_t>(kNumStages - 1 - i)] = fused;
    }
    return decoder_forward(g, pb, cfg, stages[kNumStages - 1], skips);
}

/// One forward through whichever wiring the kind selects; unused inputs may
/// be invalid Values.
inline ForwardOutputs model_forward(Graph& g, ParamBind& pb, const ModelConfig& cfg, ModelKind kind,
                                    Value rgb, Value il, Value ir) {
    switch (kind) {
        case ModelKind::dp_only: return dp_forward(g, pb, cfg, il, ir);
        case ModelKind::rgb_only: return rgb_forward(g, pb, cfg, rgb);
        default: return full_forward(g, pb, cfg, rgb, il, ir);
    }
}

}  // namespace dpdepth
