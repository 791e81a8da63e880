#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "dpdepth/checkpoint.hpp"
#include "dpdepth/config.hpp"
#include "dpdepth/gradsuite.hpp"
#include "dpdepth/metrics.hpp"
#include "dpdepth/sim.hpp"
#include "dpdepth/train.hpp"

// Command-line front end: one executable with subcommands for dataset
// synthesis (synth), staged training (train), evaluation (eval), single-sample
// inference (infer), the gradient-check suite (gradcheck), and the ablation
// sweep (ablate). Every run echoes its fully resolved configuration as
// '#'-prefixed lines, so stdout stays machine-parseable. Exit codes:
// 0 success, 1 usage error, 2 data/config error, 3 numerical failure.

namespace dpdepth {
namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

namespace detail {

/// Config file first, then --set pairs in order — later assignments win.
inline RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
    RunConfig rc;
    if (!config_path.empty()) rc.load_file(config_path);
    for (const std::string& s : sets) rc.set_pair(s);
    return rc;
}

/// Checkpoints carry their stage tag, which fixes the wiring they fit.
inline ModelKind kind_for_stage(std::uint32_t stage) {
    return stage == 1 ? ModelKind::dp_only : stage == 2 ? ModelKind::rgb_only : ModelKind::full;
}

inline ParamSet load_model(const ModelConfig& cfg, const std::string& ckpt_path, ModelKind& kind_out) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    kind_out = kind_for_stage(ck.stage);
    ParamSet ps = build_model(cfg, kind_out);
    apply_checkpoint(ps, ck, ckpt_path);
    return ps;
}

}  // namespace detail

inline int run_synth(RunConfig rc) {
    rc.finalize();
    std::cout << rc.echo();
    const std::string manifest = make_dataset(rc.n, rc.sim.seed, rc.out, rc.sim);
    std::cout << manifest << "\n";
    return kExitOk;
}

/// --stage 1/2/3 train a single stage (3 expects stage1.dpck and stage2.dpck
/// in the output directory); full runs the whole transfer schedule; no-cmtl
/// trains the fused model from scratch without reading any checkpoint.
inline int run_train(RunConfig rc, const std::string& stage) {
    rc.finalize();
    if (rc.data.empty()) throw std::runtime_error("train: no dataset (--data or a 'data =' config entry)");
    std::cout << rc.echo();
    std::filesystem::create_directories(rc.out);

    CmtlOptions opt;
    opt.stage1_steps = rc.stage1_steps;
    opt.stage2_steps = rc.stage2_steps;
    opt.stage3_steps = rc.stage3_steps;
    opt.out_dir = rc.out;
    opt.console = &std::cout;
    opt.log_every = rc.log_every;

    if (stage == "full" || stage == "no-cmtl") {
        opt.mode = stage == "full" ? TransferMode::with_transfer : TransferMode::from_scratch;
        const std::vector<RgbDpSample> dp = load_split(rc.data, "train");
        const std::vector<RgbDpSample> rgb =
            opt.mode == TransferMode::with_transfer ? load_split(rc.rgb_data, "train") : dp;
        const CmtlResult res = run_cmtl(rc.model, rc.optim, rc.loss, dp, rgb, opt);
        std::cout << "# checkpoint " << res.stage3_path << "\n";
        return kExitOk;
    }

    std::string out_path;
    if (stage == "1") {
        ParamSet ps = build_model(rc.model, ModelKind::dp_only);
        dpdepth::detail::run_one_stage(ps, rc.model, rc.optim, rc.loss, ModelKind::dp_only, 1,
                                       rc.stage1_steps, load_split(rc.data, "train"), opt, out_path);
    } else if (stage == "2") {
        ParamSet ps = build_model(rc.model, ModelKind::rgb_only);
        dpdepth::detail::run_one_stage(ps, rc.model, rc.optim, rc.loss, ModelKind::rgb_only, 2,
                                       rc.stage2_steps, load_split(rc.rgb_data, "train"), opt, out_path);
    } else {  // "3"
        ParamSet ps = build_model(rc.model, ModelKind::full);
        const std::string s1 = rc.out + "/stage1.dpck", s2 = rc.out + "/stage2.dpck";
        apply_checkpoint_prefix(ps, load_checkpoint(s1), "dp_encoder.", s1, /*with_moments=*/false);
        apply_checkpoint_prefix(ps, load_checkpoint(s2), "rgb_encoder.", s2, /*with_moments=*/false);
        save_checkpoint(rc.out + "/stage3_init.dpck", ps, 3, 0, false);
        dpdepth::detail::run_one_stage(ps, rc.model, rc.optim, rc.loss, ModelKind::full, 3,
                                       rc.stage3_steps, load_split(rc.data, "train"), opt, out_path);
    }
    std::cout << "# checkpoint " << out_path << "\n";
    return kExitOk;
}

inline int run_eval(RunConfig rc, const std::string& split, std::string name) {
    rc.finalize();
    if (rc.ckpt.empty()) throw std::runtime_error("eval: no checkpoint (--ckpt or a 'ckpt =' config entry)");
    if (rc.data.empty()) throw std::runtime_error("eval: no dataset (--data or a 'data =' config entry)");
    std::cout << rc.echo();
    ModelKind kind{};
    ParamSet ps = detail::load_model(rc.model, rc.ckpt, kind);
    if (name.empty()) name = std::filesystem::path(rc.ckpt).stem().string();
    const MetricsRow row = evaluate_model(ps, rc.model, kind, load_split(rc.data, split), name);
    std::cout << metrics_csv_header() << "\n" << row.to_csv() << "\n";
    return kExitOk;
}

inline int run_infer(RunConfig rc, const std::string& sample_dir) {
    rc.finalize();
    if (rc.ckpt.empty()) throw std::runtime_error("infer: no checkpoint (--ckpt or a 'ckpt =' config entry)");
    const RgbDpSample s = read_sample(sample_dir);
    // Fully convolutional: the sample decides the working extents.
    rc.model.height = s.rgb.dim(0);
    rc.model.width = s.rgb.dim(1);
    rc.model.validate();
    std::cout << rc.echo();
    ModelKind kind{};
    ParamSet ps = detail::load_model(rc.model, rc.ckpt, kind);
    const Tensor depth = predict_depth(ps, rc.model, kind, s);
    std::filesystem::create_directories(rc.out);
    const std::string path = (std::filesystem::path(rc.out) / "depth.fmap").string();
    write_fmap(path, depth);
    std::cout << path << "\n";
    return kExitOk;
}

inline int run_gradcheck(Real tol, Real tol_e2e) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "# tol = %g\n# tol_e2e = %g\n", tol, tol_e2e);
    std::cout << buf << "module,worst_rel_err,tolerance,probes,skipped,status\n";
    bool all_ok = true;
    for (const GradSuiteEntry& e : run_grad_suite(tol, tol_e2e)) {
        std::snprintf(buf, sizeof(buf), "%s,%.3g,%.3g,%d,%d,%s\n", e.module.c_str(), e.report.max_rel_err,
                      e.tol, e.report.probes, e.report.skipped, e.passed ? "pass" : "FAIL");
        std::cout << buf << std::flush;
        if (e.report.aborted) std::cout << "# " << e.module << ": " << e.report.abort_reason << "\n";
        all_ok = all_ok && e.passed;
    }
    return all_ok ? kExitOk : kExitNumerical;
}

/// Trains and scores the reference model plus the ten single-axis ablations:
/// attention variants, fusion score granularity, DP encoder depth, and
/// training without the staged transfer. One CSV row per configuration.
inline int run_ablate(RunConfig rc, int budget) {
    rc.optim.total_steps = budget;
    rc.stage1_steps = rc.stage2_steps = rc.stage3_steps = 0;  // all inherit the budget
    rc.finalize();
    if (rc.data.empty()) throw std::runtime_error("ablate: no dataset (--data or a 'data =' config entry)");
    std::cout << rc.echo();
    const std::vector<RgbDpSample> train_samples = load_split(rc.data, "train");
    const std::vector<RgbDpSample> rgb_samples = load_split(rc.rgb_data, "train");
    const std::vector<RgbDpSample> test_samples = load_split(rc.data, "test");
    std::filesystem::create_directories(rc.out);

    struct Row {
        const char* name;
        TransferMode mode;
        std::function<void(ModelConfig&)> tweak;
    };
    const Row rows[] = {
        {"full", TransferMode::with_transfer, [](ModelConfig&) {}},
        {"no_attention", TransferMode::with_transfer,
         [](ModelConfig& m) { m.wbipam_mode = WbipamMode::disabled; }},
        {"no_window", TransferMode::with_transfer,
         [](ModelConfig& m) { m.wbipam_mode = WbipamMode::no_window; }},
        {"unidirectional", TransferMode::with_transfer,
         [](ModelConfig& m) { m.wbipam_mode = WbipamMode::unidirectional; }},
        {"pixel_fusion", TransferMode::with_transfer,
         [](ModelConfig& m) { m.fusion_mode = FusionMode::pixel_wise; }},
        {"channel_fusion", TransferMode::with_transfer,
         [](ModelConfig& m) { m.fusion_mode = FusionMode::channel_wise; }},
        {"dp_depth_1", TransferMode::with_transfer, [](ModelConfig& m) { m.dp_depth = 1; }},
        {"dp_depth_3", TransferMode::with_transfer, [](ModelConfig& m) { m.dp_depth = 3; }},
        {"dp_depth_4", TransferMode::with_transfer, [](ModelConfig& m) { m.dp_depth = 4; }},
        {"dp_depth_5", TransferMode::with_transfer, [](ModelConfig& m) { m.dp_depth = 5; }},
        {"no_transfer", TransferMode::from_scratch, [](ModelConfig&) {}},
    };

    std::cout << metrics_csv_header() << "\n" << std::flush;
    for (const Row& row : rows) {
        ModelConfig mc = rc.model;
        row.tweak(mc);
        mc.validate();
        CmtlOptions opt;
        opt.stage1_steps = opt.stage2_steps = opt.stage3_steps = budget;
        opt.mode = row.mode;
        opt.out_dir = (std::filesystem::path(rc.out) / row.name).string();
        std::filesystem::create_directories(opt.out_dir);
        opt.console = nullptr;  // stage logs still land in the row directory
        opt.log_every = rc.log_every;
        CmtlResult res = run_cmtl(mc, rc.optim, rc.loss, train_samples, rgb_samples, opt);
        const MetricsRow m = evaluate_model(res.final_params, mc, ModelKind::full, test_samples, row.name);
        std::cout << m.to_csv() << "\n" << std::flush;
    }
    return kExitOk;
}

inline int dispatch(int argc, const char* const* argv) {
    CLI::App app{"dual-pixel depth estimation — synthesis, training, evaluation, inference"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "'key = value' config file ('#' comments)");
        cmd->add_option("--set", sets, "config override, key=value (repeatable)")
            ->type_size(1)
            ->allow_extra_args(false);
    };

    int n = 0, steps = 0, budget = 200;
    std::uint64_t seed = 0;
    std::string out, data, rgb_data, ckpt, name, sample_dir;
    std::string stage = "full", split = "test";
    Real tol = 1e-4, tol_e2e = 1e-3;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dual-pixel dataset plus manifest");
    add_common(synth);
    synth->add_option("--n", n, "sample count");
    synth->add_option("--seed", seed, "base scene seed");
    synth->add_option("--out", out, "output directory");

    CLI::App* train = app.add_subcommand("train", "train one stage or the full transfer schedule");
    add_common(train);
    train->add_option("--stage", stage, "1|2|3|full|no-cmtl (default full)")
        ->check(CLI::IsMember({"1", "2", "3", "full", "no-cmtl"}));
    train->add_option("--data", data, "dataset manifest");
    train->add_option("--rgb-data", rgb_data, "stage-2 manifest (defaults to --data)");
    train->add_option("--out", out, "checkpoint/log directory");
    train->add_option("--steps", steps, "steps per stage (overrides the 'steps' config key)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    add_common(eval);
    eval->add_option("--ckpt", ckpt, "checkpoint to evaluate");
    eval->add_option("--data", data, "dataset manifest");
    eval->add_option("--split", split, "train|val|test (default test)")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--name", name, "row label (default: checkpoint file stem)");

    CLI::App* infer = app.add_subcommand("infer", "predict a depth map for one sample directory");
    add_common(infer);
    infer->add_option("sample_dir", sample_dir, "sample directory (rgb/dpl/dpr .fmap files)")->required();
    infer->add_option("--ckpt", ckpt, "checkpoint with the weights");
    infer->add_option("--out", out, "output directory (writes depth.fmap)");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "verify analytic gradients module by module");
    gradcheck->add_option("--tol", tol, "per-module tolerance (default 1e-4)");
    gradcheck->add_option("--tol-e2e", tol_e2e, "end-to-end tolerance (default 1e-3)");

    CLI::App* ablate = app.add_subcommand("ablate", "train and score every ablation configuration");
    add_common(ablate);
    ablate->add_option("--data", data, "dataset manifest");
    ablate->add_option("--out", out, "working directory for per-row checkpoints");
    ablate->add_option("--steps", budget, "per-stage step budget (default 200)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gradcheck) return run_gradcheck(tol, tol_e2e);
        RunConfig rc = detail::resolve_config(config_path, sets);
        if (*synth) {
            if (synth->count("--n") > 0) rc.set("n", std::to_string(n));
            if (synth->count("--seed") > 0) rc.set("sim_seed", std::to_string(seed));
            if (synth->count("--out") > 0) rc.set("out", out);
            return run_synth(std::move(rc));
        }
        if (*train) {
            if (train->count("--data") > 0) rc.set("data", data);
            if (train->count("--rgb-data") > 0) rc.set("rgb_data", rgb_data);
            if (train->count("--out") > 0) rc.set("out", out);
            if (train->count("--steps") > 0) rc.set("steps", std::to_string(steps));
            return run_train(std::move(rc), stage);
        }
        if (*eval) {
            if (eval->count("--ckpt") > 0) rc.set("ckpt", ckpt);
            if (eval->count("--data") > 0) rc.set("data", data);
            return run_eval(std::move(rc), split, name);
        }
        if (*infer) {
            if (infer->count("--ckpt") > 0) rc.set("ckpt", ckpt);
            if (infer->count("--out") > 0) rc.set("out", out);
            return run_infer(std::move(rc), sample_dir);
        }
        if (*ablate) {
            if (ablate->count("--data") > 0) rc.set("data", data);
            if (ablate->count("--out") > 0) rc.set("out", out);
            return run_ablate(std::move(rc), budget);
        }
    } catch (const numerical_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;  // unreachable: require_subcommand(1)
}

}  // namespace cli
}  // namespace dpdepth
