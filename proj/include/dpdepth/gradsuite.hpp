#pragma once

#include <string>
#include <vector>

#include "dpdepth/core/gradcheck.hpp"
#include "dpdepth/loss.hpp"
#include "dpdepth/model.hpp"

// Module-by-module gradient verification: each entry pits one functional
// layer's tape against central finite differences on small inputs. The
// end-to-end entry runs the full model plus loss at 32x32 with sampled
// parameter probes (looser tolerance — error compounds with depth).

namespace dpdepth {

struct GradSuiteEntry {
    std::string module;
    GradReport report;
    Real tol = 0.0;
    bool passed = false;
};

namespace detail {

inline Tensor rand_tensor(std::uint64_t seed, std::vector<int> shape, Real lo, Real hi) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// A mask with zeroed borders and random interior holes — the shape losses
/// see in training.
inline Tensor rand_mask(std::uint64_t seed, int h, int w) {
    Rng rng(seed);
    Tensor m({h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            m[(y * w + x)] = (y == 0 || x == 0 || y == h - 1 || x == w - 1) ? 0.0
                             : (rng.uniform() < 0.85 ? 1.0 : 0.0);
    return m;
}

/// Narrow-model config for module probes: smallest extents the six-stage
/// ladder accepts, thin channels so finite differences stay cheap.
inline ModelConfig probe_config(int dp_depth) {
    ModelConfig cfg;
    cfg.height = 32;
    cfg.width = 32;
    cfg.base_channels = 4;
    cfg.rgb_channels = default_rgb_channels(4);
    cfg.dp_depth = dp_depth;
    cfg.window_k = 2;
    return cfg;
}

inline GradSuiteEntry run_entry(const std::string& module, Real tol,
                                const std::function<Value(Graph&, const std::vector<Value>&)>& fn,
                                std::vector<GradCheckInput> inputs, Real eps, int max_per_tensor) {
    GradSuiteEntry e;
    e.module = module;
    e.tol = tol;
    e.report = grad_check(fn, std::move(inputs), eps, max_per_tensor);
    e.passed = e.report.ok(tol);
    return e;
}

inline void model_probe_inputs(const ModelConfig& cfg, ModelKind kind, std::uint64_t seed,
                               std::vector<GradCheckInput>& inputs, size_t& n_params) {
    ParamSet ps = build_model(cfg, kind);
    for (size_t i = 0; i < ps.size(); ++i) inputs.push_back({ps[i].name, ps[i].value});
    n_params = inputs.size();
    if (kind != ModelKind::dp_only)
        inputs.push_back({"input.rgb", rand_tensor(seed + 1, {1, cfg.height, cfg.width, 3}, 0.0, 1.0)});
    if (kind != ModelKind::rgb_only) {
        inputs.push_back({"input.dp_l", rand_tensor(seed + 2, {1, cfg.height, cfg.width, 1}, 0.0, 1.0)});
        inputs.push_back({"input.dp_r", rand_tensor(seed + 3, {1, cfg.height, cfg.width, 1}, 0.0, 1.0)});
    }
}

inline Value bind_and_forward_sum(Graph& g, const std::vector<Value>& vals,
                                  const std::vector<GradCheckInput>& inputs, size_t n_params,
                                  const ModelConfig& cfg, ModelKind kind) {
    ParamBind pb(g);
    for (size_t i = 0; i < n_params; ++i) pb.bind_external(inputs[i].name, vals[i]);
    Value rgb, il, ir;
    size_t j = n_params;
    if (kind != ModelKind::dp_only) rgb = vals[j++];
    if (kind != ModelKind::rgb_only) {
        il = vals[j++];
        ir = vals[j++];
    }
    ForwardOutputs out = model_forward(g, pb, cfg, kind, rgb, il, ir);
    Value s = sum_all(g, out.depth);
    for (const Value& v : out.intermediates) s = add(g, s, sum_all(g, v));
    return s;
}

}  // namespace detail

/// The per-module checks the gradcheck command and the acceptance gate run.
/// Small modules use tol (default 1e-4); the end-to-end check uses tol_e2e.
inline std::vector<GradSuiteEntry> run_grad_suite(Real tol = 1e-4, Real tol_e2e = 1e-3) {
    using detail::rand_mask;
    using detail::rand_tensor;
    std::vector<GradSuiteEntry> out;

    // --- core tensor ops: two composite chains over every differentiable op
    {
        std::vector<GradCheckInput> inputs{
            {"x", rand_tensor(11, {1, 8, 8, 3}, -1.0, 1.0)},
            {"conv_w", rand_tensor(12, {3, 3, 3, 4}, -0.4, 0.4)},
            {"conv_b", rand_tensor(13, {4}, -0.2, 0.2)},
            {"dw_w", rand_tensor(14, {3, 3, 4}, -0.4, 0.4)},
            {"alpha", rand_tensor(15, {4}, 0.1, 0.4)},
            {"proj_w", rand_tensor(16, {4, 2}, -0.5, 0.5)},
        };
        auto fn = [](Graph& g, const std::vector<Value>& v) {
            Value x = conv2d(g, v[0], v[1], v[2], 1, Padding::same);
            x = prelu(g, x, v[4]);
            x = depthwise_conv2d(g, x, v[3], Value{}, 2, Padding::same);
            x = sigmoid(g, x);
            x = resize_bilinear(g, x, 6, 6);
            x = matmul_lastdim(g, x, v[5], Value{});
            Value a = slice_channels(g, x, 0, 1);
            Value b = slice_channels(g, x, 1, 2);
            Value m = mul(g, a, sigmoid(g, b));
            Value c = concat_channels(g, {m, abs_v(g, b)});
            Value s = softmax_groups(g, c, 2);
            return sum_all(g, mul(g, c, s));
        };
        out.push_back(detail::run_entry("ops_spatial", tol, fn, inputs, 1e-5, 0));
    }
    {
        std::vector<GradCheckInput> inputs{
            {"p", rand_tensor(21, {6, 6, 1}, 0.05, 0.95)},
            {"q", rand_tensor(22, {6, 6, 1}, 0.05, 0.95)},
            {"s", rand_tensor(23, {1}, 0.5, 1.5)},
            {"u", rand_tensor(24, {1, 5, 5, 2}, -1.0, 1.0)},
            {"w3", rand_tensor(25, {6, 1, 1}, 0.5, 1.5)},
        };
        auto fn = [](Graph& g, const std::vector<Value>& v) {
            Value r = sub(g, v[0], v[1]);
            r = div(g, r, add_const(g, sqrt_v(g, v[1]), 0.5));
            r = add_scalarv(g, mul_scalarv(g, r, v[2]), v[2]);
            Value gx = diff_x(g, r);
            Value gy = diff_y(g, r);
            Value p2 = avg_pool2(g, r);
            Value pad = pad_hw(g, v[3], 4, 4);
            Value crop = crop_hw(g, pad, 3, 3);
            return add(g, add(g, mean_all(g, abs_v(g, gx)), mean_all(g, abs_v(g, gy))),
                       add(g, add(g, sum_all(g, crop), sum_all(g, p2)),
                           mean_all(g, mul_bcast(g, r, v[4]))));
        };
        out.push_back(detail::run_entry("ops_elementwise", tol, fn, inputs, 1e-5, 0));
    }

    // --- attention (windowing, projections, softmax scores, shared residual)
    {
        const int c = 4;
        ModelConfig cfg = detail::probe_config(1);
        ParamSet ps = build_model(cfg, ModelKind::dp_only);
        std::vector<GradCheckInput> inputs{
            {"fl", rand_tensor(31, {1, 8, 8, c}, -1.0, 1.0)},
            {"fr", rand_tensor(32, {1, 8, 8, c}, -1.0, 1.0)},
        };
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps[i].name.rfind("dp_encoder.block1.att.", 0) == 0) inputs.push_back({ps[i].name, ps[i].value});
        auto fn = [c](Graph& g, const std::vector<Value>& v) {
            ParamBind pb(g);
            // names arrive in declaration order: wq, wk, res_w1, res_b1,
            // res_alpha, res_w2, res_b2, post_w, post_b
            WbipamWeights w;
            w.wq = v[2];
            w.wk = v[3];
            w.res = {v[4], v[5], v[6], v[7], v[8]};
            w.post_w = v[9];
            w.post_b = v[10];
            WbipamOutputs o = wbipam_forward(g, v[0], v[1], 2, Axis::vertical, w, WbipamMode::full, false);
            return add(g, sum_all(g, o.fl), mean_all(g, o.fr));
        };
        out.push_back(detail::run_entry("attention", tol, fn, inputs, 1e-5, 0));
    }

    // --- fusion (scoring convs, group softmax, re-weighting)
    {
        ModelConfig cfg = detail::probe_config(1);
        ParamSet ps = build_model(cfg, ModelKind::full);
        std::vector<GradCheckInput> inputs{
            {"fl", rand_tensor(41, {1, 4, 4, 4}, -1.0, 1.0)},
            {"fr", rand_tensor(42, {1, 4, 4, 4}, -1.0, 1.0)},
            {"fi", rand_tensor(43, {1, 4, 4, 4}, -1.0, 1.0)},
        };
        std::vector<std::string> names;
        for (size_t i = 0; i < ps.size(); ++i)
            if (ps[i].name.rfind("fusion.block1.", 0) == 0) {
                inputs.push_back({ps[i].name, ps[i].value});
                names.push_back(ps[i].name);
            }
        auto fn = [cfg, names](Graph& g, const std::vector<Value>& v) {
            ParamBind pb(g);
            for (size_t i = 0; i < names.size(); ++i) pb.bind_external(names[i], v[3 + i]);
            Value f = fusion_forward(g, pb, cfg, 1, v[0], v[1], v[2]);
            return sum_all(g, f);
        };
        out.push_back(detail::run_entry("fusion", tol, fn, inputs, 1e-5, 0));
    }

    // --- encoders and decoder via the stage-1/stage-2 wirings
    for (auto [name, kind] : {std::pair<const char*, ModelKind>{"rgb_encoder_decoder", ModelKind::rgb_only},
                              {"dp_encoder_decoder", ModelKind::dp_only}}) {
        ModelConfig cfg = detail::probe_config(2);
        std::vector<GradCheckInput> inputs;
        size_t n_params = 0;
        detail::model_probe_inputs(cfg, kind, 50, inputs, n_params);
        auto fn = [cfg, kind, n_params, inputs](Graph& g, const std::vector<Value>& v) {
            return detail::bind_and_forward_sum(g, v, inputs, n_params, cfg, kind);
        };
        out.push_back(detail::run_entry(name, tol, fn, inputs, 1e-5, 2));
    }

    // --- loss (affine fit, masked residuals, gradient matching, deep supervision)
    {
        std::vector<GradCheckInput> inputs{
            {"pred", rand_tensor(61, {8, 8, 1}, 0.05, 0.95)},
            {"i1", rand_tensor(62, {2, 2, 1}, 0.05, 0.95)},
            {"i2", rand_tensor(63, {4, 4, 1}, 0.05, 0.95)},
        };
        const Tensor target = rand_tensor(64, {8, 8, 1}, 0.0, 1.0);
        const Tensor mask = rand_mask(65, 8, 8);
        LossConfig lc;
        auto fn = [target, mask, lc](Graph& g, const std::vector<Value>& v) {
            return total_loss_g(g, v[0], {v[1], v[2]}, target, mask, lc);
        };
        out.push_back(detail::run_entry("loss", tol, fn, inputs, 1e-5, 0));
    }

    // --- end to end: full model + total loss at 32x32, sampled probes
    {
        ModelConfig cfg;
        cfg.height = cfg.width = 32;
        std::vector<GradCheckInput> inputs;
        size_t n_params = 0;
        detail::model_probe_inputs(cfg, ModelKind::full, 70, inputs, n_params);
        const Tensor target = rand_tensor(71, {1, 32, 32, 1}, 0.0, 1.0);
        Tensor mask4({1, 32, 32, 1});
        mask4.data = rand_mask(72, 32, 32).data;
        LossConfig lc;
        auto fn = [cfg, n_params, inputs, target, mask4, lc](Graph& g, const std::vector<Value>& v) {
            ParamBind pb(g);
            for (size_t i = 0; i < n_params; ++i) pb.bind_external(inputs[i].name, v[i]);
            ForwardOutputs o = full_forward(g, pb, cfg, v[n_params], v[n_params + 1], v[n_params + 2]);
            return total_loss_batch_g(g, o.depth, o.intermediates, target, mask4, lc);
        };
        out.push_back(detail::run_entry("end_to_end", tol_e2e, fn, inputs, 1e-5, 2));
    }
    return out;
}

}  // namespace dpdepth
