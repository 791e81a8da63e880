#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dpdepth/core/graph.hpp"
#include "dpdepth/core/rng.hpp"
#include "dpdepth/core/tensor.hpp"

// Finite-difference gradient checker: rebuilds the computation around each
// perturbed entry and compares central differences against the tape.

namespace dpdepth {

struct GradCheckInput {
    std::string name;
    Tensor value;
};

struct GradReport {
    Real eps = 0.0;
    bool aborted = false;       // a function value came back non-finite
    std::string abort_reason;
    Real max_rel_err = 0.0;
    int probes = 0;             // elements actually compared
    int skipped = 0;            // elements dropped by the two-scale filter
    struct Entry {
        std::string name;
        Real rel_err = 0.0;     // max over the checked elements of this tensor
    };
    std::vector<Entry> per_param;

    // More than half the probes landing on kinks would mean the check lost
    // its teeth, so that also counts as failure.
    bool ok(Real tol) const { return !aborted && max_rel_err <= tol && skipped * 2 <= probes; }
};

/// fn builds a scalar Value from leaves handed over in input order. Gradients
/// from one taped backward pass are compared against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps), element by element. Relative error is
/// |a - n| / max(1, |a|, |n|), so tiny gradients are judged on absolute terms.
/// With max_per_tensor > 0, at most that many elements per tensor are probed,
/// chosen by a generator seeded from the tensor name so reruns probe the same
/// elements.
///
/// Piecewise-linear activations make some probe intervals straddle a slope
/// change, which corrupts the difference quotient no matter how the tape
/// behaves. The two-scale filter catches those: estimates at eps and eps/2
/// agree to roundoff on smooth stretches but disagree across a kink, and
/// disagreeing probes are skipped. A genuine backward bug cannot hide behind
/// the filter because its tape-vs-difference mismatch is consistent across
/// scales. filter_tol <= 0 disables the filter (two evaluations per probe
/// instead of four).
inline GradReport grad_check(const std::function<Value(Graph&, const std::vector<Value>&)>& fn,
                             std::vector<GradCheckInput> inputs, Real eps, int max_per_tensor = 0,
                             Real filter_tol = 1e-5) {
    GradReport report;
    report.eps = eps;
    if (eps <= 0.0) {
        report.aborted = true;
        report.abort_reason = "eps must be positive";
        return report;
    }

    // Analytic pass.
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Value> leaves;
        leaves.reserve(inputs.size());
        for (const auto& in : inputs) leaves.push_back(g.leaf(in.value));
        Value root = fn(g, leaves);
        const Tensor& rv = g.val(root);
        if (rv.numel() != 1) {
            report.aborted = true;
            report.abort_reason = "fn output is not scalar: " + rv.shape_str();
            return report;
        }
        if (!std::isfinite(rv[0])) {
            report.aborted = true;
            report.abort_reason = "fn returned a non-finite value at the base point";
            return report;
        }
        g.backward(root);
        for (Value v : leaves) analytic.push_back(g.grad(v));
    }

    auto eval = [&](const std::vector<GradCheckInput>& pt, bool& finite) -> Real {
        Graph g;
        std::vector<Value> consts;
        consts.reserve(pt.size());
        for (const auto& in : pt) consts.push_back(g.constant(in.value));
        Value root = fn(g, consts);
        const Real v = g.val(root)[0];
        finite = std::isfinite(v);
        return v;
    };

    for (size_t t = 0; t < inputs.size(); ++t) {
        GradReport::Entry entry;
        entry.name = inputs[t].name;
        const std::int64_t n = inputs[t].value.numel();

        std::vector<std::int64_t> probe;
        if (max_per_tensor > 0 && n > max_per_tensor) {
            Rng rng(fnv1a64(inputs[t].name) ^ 0x9e3779b97f4a7c15ULL);
            std::vector<std::int64_t> all(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            rng.shuffle(all);
            probe.assign(all.begin(), all.begin() + max_per_tensor);
        } else {
            probe.resize(static_cast<size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) probe[static_cast<size_t>(i)] = i;
        }

        for (std::int64_t i : probe) {
            const Real saved = inputs[t].value[i];
            auto central = [&](Real h, bool& finite) {
                bool fin_hi = false, fin_lo = false;
                inputs[t].value[i] = saved + h;
                const Real hi = eval(inputs, fin_hi);
                inputs[t].value[i] = saved - h;
                const Real lo = eval(inputs, fin_lo);
                inputs[t].value[i] = saved;
                finite = fin_hi && fin_lo;
                return (hi - lo) / (2.0 * h);
            };
            bool finite = false;
            const Real numeric = central(eps, finite);
            if (!finite) {
                report.aborted = true;
                report.abort_reason = "fn returned a non-finite value while probing " + inputs[t].name;
                return report;
            }
            ++report.probes;
            if (filter_tol > 0.0) {
                bool finite_half = false;
                const Real numeric_half = central(eps * 0.5, finite_half);
                if (!finite_half) {
                    report.aborted = true;
                    report.abort_reason = "fn returned a non-finite value while probing " + inputs[t].name;
                    return report;
                }
                const Real agree = std::abs(numeric - numeric_half) /
                                   std::max({1.0, std::abs(numeric), std::abs(numeric_half)});
                if (agree > filter_tol) {
                    ++report.skipped;
                    continue;
                }
            }
            const Real a = analytic[t][i];
            const Real rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            entry.rel_err = std::max(entry.rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace dpdepth
