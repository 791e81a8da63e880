#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/core/tensor.hpp"
#include "dpdepth/model.hpp"

// Adam with polynomial learning-rate decay. Parameters and moment estimates
// are re-quantized to the f32 grid after every update so that checkpoints
// (f32 payloads) restore training state bit-exactly.

namespace dpdepth {

/// Raised when training encounters NaN/Inf (distinct from config or data
/// errors so the command line can map it to its own exit code).
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct OptimConfig {
    Real lr0 = 1e-4;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    int total_steps = 500;
    Real poly_power = 0.9;
    int batch_size = 2;
    std::uint64_t seed = 0;

    void validate() const {
        if (total_steps < 1) throw std::invalid_argument("optim config: total_steps must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("optim config: batch_size must be >= 1");
        if (!(lr0 > 0.0)) throw std::invalid_argument("optim config: lr0 must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("optim config: betas must lie in [0,1)");
    }
};

/// lr0 * (1 - step/total)^power; steps past the schedule end clamp to 0.
inline Real poly_lr(int step, const OptimConfig& oc) {
    if (step < 0) throw std::invalid_argument("poly_lr: negative step");
    if (step >= oc.total_steps) return 0.0;
    return oc.lr0 * std::pow(1.0 - static_cast<Real>(step) / static_cast<Real>(oc.total_steps),
                             oc.poly_power);
}

/// One bias-corrected Adam update over every parameter. grads must align with
/// the set's insertion order; step is the 0-based index of the step being
/// taken (so the first step runs at the full initial rate). A non-finite
/// gradient entry rejects the step before anything is touched.
inline void adam_step(ParamSet& ps, const std::vector<Tensor>& grads, const OptimConfig& oc, int step) {
    if (grads.size() != ps.size())
        throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                    std::to_string(ps.size()) + " parameters");
    for (size_t i = 0; i < ps.size(); ++i) {
        require_shape(grads[i], ps[i].value.shape, "adam_step gradient for " + ps[i].name);
        if (!grads[i].all_finite())
            throw numerical_error("adam_step: non-finite gradient for " + ps[i].name + " at step " +
                                  std::to_string(step));
    }
    const Real lr = poly_lr(step, oc);
    const Real bc1 = 1.0 - std::pow(oc.beta1, static_cast<Real>(step + 1));
    const Real bc2 = 1.0 - std::pow(oc.beta2, static_cast<Real>(step + 1));
    for (size_t i = 0; i < ps.size(); ++i) {
        Param& p = ps[i];
        const Tensor& gr = grads[i];
        for (std::int64_t j = 0; j < p.value.numel(); ++j) {
            const Real gj = gr[j];
            p.m[j] = oc.beta1 * p.m[j] + (1.0 - oc.beta1) * gj;
            p.v[j] = oc.beta2 * p.v[j] + (1.0 - oc.beta2) * gj * gj;
            const Real mhat = p.m[j] / bc1;
            const Real vhat = p.v[j] / bc2;
            p.value[j] -= lr * mhat / (std::sqrt(vhat) + oc.eps);
        }
        quantize_f32(p.value);
        quantize_f32(p.m);
        quantize_f32(p.v);
    }
}

}  // namespace dpdepth
