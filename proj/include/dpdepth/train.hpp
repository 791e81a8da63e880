#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/checkpoint.hpp"
#include "dpdepth/loss.hpp"
#include "dpdepth/metrics.hpp"
#include "dpdepth/model.hpp"
#include "dpdepth/optim.hpp"
#include "dpdepth/sim.hpp"

// Training loop and the three-stage cross-modal transfer:
//   stage 1  DP pair -> depth      (dp_only wiring; bridge + decoder discarded)
//   stage 2  RGB -> depth          (rgb_only wiring)
//   stage 3  full fused network, DP/RGB encoders initialized from the
//            stage-1/stage-2 checkpoints, fusion + decoder fresh.
// Everything is bit-reproducible from (seed, config, manifest).

namespace dpdepth {

/// Loss log sinks: every line goes to both streams when set. Lines are
/// "step<TAB>loss" with 1-based step numbers.
struct TrainLog {
    std::ostream* console = nullptr;
    std::ostream* file = nullptr;
    int log_every = 1;

    void line(int step, Real loss) const {
        if ((console == nullptr && file == nullptr) || log_every < 1) return;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d\t%.10g\n", step, loss);
        if (console != nullptr) *console << buf << std::flush;
        if (file != nullptr) *file << buf;
    }
};

inline std::vector<RgbDpSample> load_split(const std::string& manifest_path, const std::string& split) {
    std::vector<RgbDpSample> out;
    for (const ManifestEntry& e : read_manifest(manifest_path))
        if (e.split == split) out.push_back(read_sample(e.dir));
    if (out.empty())
        throw std::runtime_error(manifest_path + ": no '" + split + "' samples");
    return out;
}

struct Batch {
    Tensor rgb;     // (B,H,W,3)
    Tensor dp_l;    // (B,H,W,1)
    Tensor dp_r;    // (B,H,W,1)
    Tensor target;  // (B,H,W,1) inverse depth
    Tensor mask;    // (B,H,W,1)
};

namespace detail {

inline void stack_into(Tensor& dst, int b, const Tensor& src) {
    const std::int64_t n = src.numel();
    for (std::int64_t i = 0; i < n; ++i) dst[b * n + i] = src[i];
}

inline void require_sample_dims(const RgbDpSample& s, const ModelConfig& cfg) {
    if (s.rgb.dim(0) != cfg.height || s.rgb.dim(1) != cfg.width)
        throw std::runtime_error("sample is " + std::to_string(s.rgb.dim(0)) + "x" +
                                 std::to_string(s.rgb.dim(1)) + " but the model expects " +
                                 std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
}

}  // namespace detail

inline Batch assemble_batch(const std::vector<RgbDpSample>& samples, const std::vector<int>& ids,
                            const ModelConfig& cfg) {
    const int b = static_cast<int>(ids.size());
    Batch out{Tensor({b, cfg.height, cfg.width, 3}), Tensor({b, cfg.height, cfg.width, 1}),
              Tensor({b, cfg.height, cfg.width, 1}), Tensor({b, cfg.height, cfg.width, 1}),
              Tensor({b, cfg.height, cfg.width, 1})};
    for (int i = 0; i < b; ++i) {
        const RgbDpSample& s = samples[static_cast<size_t>(ids[static_cast<size_t>(i)])];
        detail::require_sample_dims(s, cfg);
        detail::stack_into(out.rgb, i, s.rgb);
        detail::stack_into(out.dp_l, i, s.dp_l);
        detail::stack_into(out.dp_r, i, s.dp_r);
        detail::stack_into(out.target, i, s.invdepth);
        detail::stack_into(out.mask, i, s.mask);
    }
    return out;
}

/// Runs oc.total_steps optimization steps over the samples: seeded epoch
/// shuffle, forward, affine-invariant total loss, backward, Adam. The logged
/// loss is the batch loss before the update. A non-finite loss or gradient
/// halts immediately.
inline void train_stage(ParamSet& ps, const ModelConfig& cfg, const OptimConfig& oc, const LossConfig& lc,
                        ModelKind kind, const std::vector<RgbDpSample>& samples, const TrainLog& log) {
    oc.validate();
    if (samples.empty()) throw std::runtime_error("train_stage: empty sample set");
    for (const auto& s : samples) detail::require_sample_dims(s, cfg);

    Rng shuffle_rng(oc.seed ^ fnv1a64("batch-shuffle"));
    std::vector<int> perm(samples.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    size_t cursor = perm.size();  // forces a shuffle before the first batch

    for (int step = 0; step < oc.total_steps; ++step) {
        std::vector<int> ids(static_cast<size_t>(oc.batch_size));
        for (int b = 0; b < oc.batch_size; ++b) {
            if (cursor == perm.size()) {
                shuffle_rng.shuffle(perm);
                cursor = 0;
            }
            ids[static_cast<size_t>(b)] = perm[cursor++];
        }
        const Batch batch = assemble_batch(samples, ids, cfg);

        Graph g;
        ParamBind pb(g, ps);
        Value rgb, il, ir;
        if (kind != ModelKind::dp_only) rgb = g.constant(batch.rgb);
        if (kind != ModelKind::rgb_only) {
            il = g.constant(batch.dp_l);
            ir = g.constant(batch.dp_r);
        }
        ForwardOutputs out = model_forward(g, pb, cfg, kind, rgb, il, ir);
        Value loss = total_loss_batch_g(g, out.depth, out.intermediates, batch.target, batch.mask, lc);
        const Real loss_value = g.val(loss)[0];
        if (!std::isfinite(loss_value))
            throw numerical_error("train_stage: non-finite loss at step " + std::to_string(step + 1));
        g.backward(loss);
        std::vector<Tensor> grads;
        grads.reserve(ps.size());
        for (size_t i = 0; i < ps.size(); ++i) grads.push_back(pb.grad_of(ps[i].name));
        adam_step(ps, grads, oc, step);

        const int shown = step + 1;
        if (shown % log.log_every == 0 || shown == oc.total_steps) log.line(shown, loss_value);
    }
}

// ------------------------------------------------------------ evaluation

/// Maps a sample to a predicted inverse-depth map (H,W,1).
using Predictor = std::function<Tensor(const RgbDpSample&)>;

inline Tensor predict_depth(ParamSet& ps, const ModelConfig& cfg, ModelKind kind, const RgbDpSample& s) {
    const Batch batch = assemble_batch({s}, {0}, cfg);
    Graph g;
    ParamBind pb(g, ps);
    Value rgb, il, ir;
    if (kind != ModelKind::dp_only) rgb = g.constant(batch.rgb);
    if (kind != ModelKind::rgb_only) {
        il = g.constant(batch.dp_l);
        ir = g.constant(batch.dp_r);
    }
    ForwardOutputs out = model_forward(g, pb, cfg, kind, rgb, il, ir);
    return slice_sample_tensor(g.val(out.depth), 0);
}

/// Mean per-sample metrics over a sample set; the predictor hook lets tests
/// substitute an oracle (e.g. the ground truth itself).
inline MetricsRow evaluate_rows(const std::vector<RgbDpSample>& samples, const Predictor& predictor,
                                const std::string& model_name) {
    if (samples.empty()) throw std::runtime_error("evaluate: empty sample set");
    Real sum_srcc = 0.0, sum_a1 = 0.0, sum_a2 = 0.0;
    for (const RgbDpSample& s : samples) {
        const Tensor pred = predictor(s);
        require_shape(pred, s.invdepth.shape, "evaluate prediction");
        sum_srcc += 1.0 - srcc(pred, s.invdepth, s.mask);
        sum_a1 += aiwe(pred, s.invdepth, s.mask, 1);
        sum_a2 += aiwe(pred, s.invdepth, s.mask, 2);
    }
    MetricsRow row;
    row.model_name = model_name;
    const Real n = static_cast<Real>(samples.size());
    row.one_minus_srcc = sum_srcc / n;
    row.aiwe1 = sum_a1 / n;
    row.aiwe2 = sum_a2 / n;
    row.n_samples = static_cast<int>(samples.size());
    return row;
}

inline MetricsRow evaluate_model(ParamSet& ps, const ModelConfig& cfg, ModelKind kind,
                                 const std::vector<RgbDpSample>& samples, const std::string& model_name) {
    return evaluate_rows(
        samples, [&](const RgbDpSample& s) { return predict_depth(ps, cfg, kind, s); }, model_name);
}

// ------------------------------------------------------- staged transfer

enum class TransferMode { with_transfer, from_scratch };

struct CmtlOptions {
    int stage1_steps = 500;
    int stage2_steps = 500;
    int stage3_steps = 500;
    TransferMode mode = TransferMode::with_transfer;
    std::string out_dir;       // receives stageN.dpck and stageN.log
    std::ostream* console = nullptr;
    int log_every = 1;
};

struct CmtlResult {
    std::string stage1_path;      // empty in from-scratch mode
    std::string stage2_path;      // empty in from-scratch mode
    std::string stage3_init_path; // full model before stage-3 training
    std::string stage3_path;
    ParamSet final_params;
};

namespace detail {

inline void run_one_stage(ParamSet& ps, const ModelConfig& cfg, const OptimConfig& oc_base,
                          const LossConfig& lc, ModelKind kind, int stage_tag, int steps,
                          const std::vector<RgbDpSample>& samples, const CmtlOptions& opt,
                          std::string& out_path) {
    OptimConfig oc = oc_base;
    oc.total_steps = steps;
    std::ofstream log_file(opt.out_dir + "/stage" + std::to_string(stage_tag) + ".log",
                           std::ios::trunc);
    if (!log_file) throw std::runtime_error(opt.out_dir + ": cannot write stage log");
    TrainLog log{opt.console, &log_file, opt.log_every};
    train_stage(ps, cfg, oc, lc, kind, samples, log);
    out_path = opt.out_dir + "/stage" + std::to_string(stage_tag) + ".dpck";
    save_checkpoint(out_path, ps, static_cast<std::uint32_t>(stage_tag),
                    static_cast<std::uint64_t>(steps), true);
}

}  // namespace detail

/// The full transfer schedule. With transfer: train stage 1 (DP) and stage 2
/// (RGB), then build the fused model, overwrite its dp_encoder.* / rgb_encoder.*
/// tensors from those checkpoints (fusion/decoder keep their fresh draw),
/// snapshot the initialization, and train stage 3. From scratch ("w/o CmTL"):
/// only stage 3 runs, from a fresh build — no checkpoint is ever read.
inline CmtlResult run_cmtl(const ModelConfig& cfg, const OptimConfig& oc, const LossConfig& lc,
                           const std::vector<RgbDpSample>& dp_samples,
                           const std::vector<RgbDpSample>& rgb_samples, const CmtlOptions& opt) {
    CmtlResult res;
    if (opt.mode == TransferMode::with_transfer) {
        ParamSet ps1 = build_model(cfg, ModelKind::dp_only);
        detail::run_one_stage(ps1, cfg, oc, lc, ModelKind::dp_only, 1, opt.stage1_steps, dp_samples, opt,
                              res.stage1_path);
        ParamSet ps2 = build_model(cfg, ModelKind::rgb_only);
        detail::run_one_stage(ps2, cfg, oc, lc, ModelKind::rgb_only, 2, opt.stage2_steps, rgb_samples, opt,
                              res.stage2_path);
        ParamSet ps3 = build_model(cfg, ModelKind::full);
        apply_checkpoint_prefix(ps3, load_checkpoint(res.stage1_path), "dp_encoder.", res.stage1_path,
                                /*with_moments=*/false);
        apply_checkpoint_prefix(ps3, load_checkpoint(res.stage2_path), "rgb_encoder.", res.stage2_path,
                                /*with_moments=*/false);
        res.stage3_init_path = opt.out_dir + "/stage3_init.dpck";
        save_checkpoint(res.stage3_init_path, ps3, 3, 0, false);
        detail::run_one_stage(ps3, cfg, oc, lc, ModelKind::full, 3, opt.stage3_steps, dp_samples, opt,
                              res.stage3_path);
        res.final_params = std::move(ps3);
    } else {
        ParamSet ps3 = build_model(cfg, ModelKind::full);
        res.stage3_init_path = opt.out_dir + "/stage3_init.dpck";
        save_checkpoint(res.stage3_init_path, ps3, 3, 0, false);
        detail::run_one_stage(ps3, cfg, oc, lc, ModelKind::full, 3, opt.stage3_steps, dp_samples, opt,
                              res.stage3_path);
        res.final_params = std::move(ps3);
    }
    return res;
}

}  // namespace dpdepth
