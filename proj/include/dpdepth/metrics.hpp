#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpdepth/loss.hpp"
#include "dpdepth/core/tensor.hpp"

// Evaluation metrics: Spearman rank correlation (reported as 1-SRCC) and
// affine-invariant weighted errors AIWE 1 (mean absolute) / AIWE 2 (root mean
// square), both after the least-squares alignment shared with the loss.

namespace dpdepth {

namespace detail {

/// Average ranks (1-based) with ties sharing the mean of their rank range.
inline std::vector<Real> average_ranks(const std::vector<Real>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<Real> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const Real r = 0.5 * (static_cast<Real>(i) + static_cast<Real>(j)) + 1.0;
        for (size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
        i = j + 1;
    }
    return ranks;
}

inline Real pearson(const std::vector<Real>& x, const std::vector<Real>& y) {
    const size_t n = x.size();
    Real mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<Real>(n);
    my /= static_cast<Real>(n);
    Real sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Real dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;  // constant input: correlation defined as 0
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

/// Spearman rank correlation over valid pixels (average-rank tie handling,
/// Pearson on the ranks). Constant prediction or target yields 0.
inline Real srcc(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    require_shape(target, pred.shape, "srcc");
    require_shape(mask, pred.shape, "srcc");
    std::vector<Real> p, t;
    for (std::int64_t i = 0; i < pred.numel(); ++i)
        if (mask[i] != 0.0) {
            p.push_back(pred[i]);
            t.push_back(target[i]);
        }
    if (p.size() < 2) throw std::invalid_argument("srcc: fewer than 2 valid pixels");
    return detail::pearson(detail::average_ranks(p), detail::average_ranks(t));
}

/// Affine-invariant weighted error: p=1 mean absolute, p=2 root mean square,
/// both on the least-squares-aligned residual.
inline Real aiwe(const Tensor& pred, const Tensor& target, const Tensor& mask, int p) {
    if (p != 1 && p != 2) throw std::invalid_argument("aiwe: p must be 1 or 2");
    if (p == 1) return si_mae(pred, target, mask);
    const detail::MaskedMoments m = detail::masked_moments(pred, target, mask, "aiwe");
    const AffineFit fit = affine_align(pred, target, mask);
    Real acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const Real r = fit.a * pred[i] + fit.b - target[i];
        acc += mask[i] * r * r;
    }
    return std::sqrt(acc / m.n);
}

struct MetricsRow {
    std::string model_name;
    Real one_minus_srcc = 0.0;
    Real aiwe1 = 0.0;
    Real aiwe2 = 0.0;
    int n_samples = 0;

    /// Comma-separated row, reals at 6 significant digits.
    std::string to_csv() const {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6g,%d", model_name.c_str(), one_minus_srcc, aiwe1,
                      aiwe2, n_samples);
        return std::string(buf);
    }
};

inline std::string metrics_csv_header() { return "model_name,one_minus_srcc,aiwe1,aiwe2,n_samples"; }

}  // namespace dpdepth
