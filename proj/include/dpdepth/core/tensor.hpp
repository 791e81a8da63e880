#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpdepth {

using Real = double;

/// Dense row-major tensor of doubles. Rank-4 maps use the (batch, height,
/// width, channels) convention; window stacks are (P, k, C); weights carry
/// whatever rank their op expects.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape_) : shape(std::move(shape_)) {
        data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    Tensor(std::vector<int> shape_, std::vector<Real> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, Real v) {
        Tensor t(std::move(shape));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    Real& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
    Real operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Rank-4 (B,H,W,C) accessors.
    Real& at4(int b, int y, int x, int c) {
        return data[static_cast<size_t>(((static_cast<std::int64_t>(b) * shape[1] + y) * shape[2] + x) * shape[3] + c)];
    }
    Real at4(int b, int y, int x, int c) const {
        return data[static_cast<size_t>(((static_cast<std::int64_t>(b) * shape[1] + y) * shape[2] + x) * shape[3] + c)];
    }

    // Rank-3 (H,W,C) accessors.
    Real& at3(int y, int x, int c) {
        return data[static_cast<size_t>((static_cast<std::int64_t>(y) * shape[1] + x) * shape[2] + c)];
    }
    Real at3(int y, int x, int c) const {
        return data[static_cast<size_t>((static_cast<std::int64_t>(y) * shape[1] + x) * shape[2] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative extent in " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '(';
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ')';
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape); }

    std::vector<int> shape;
    std::vector<Real> data;
};

inline void require_shape(const Tensor& t, const std::vector<int>& want, const std::string& who) {
    if (t.shape != want)
        throw std::invalid_argument(who + ": expected shape " + Tensor::shape_str(want) + ", got " +
                                    t.shape_str());
}

inline void require_rank(const Tensor& t, int r, const std::string& who) {
    if (t.rank() != r)
        throw std::invalid_argument(who + ": expected rank " + std::to_string(r) + " tensor, got shape " +
                                    t.shape_str());
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        throw std::invalid_argument("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Real m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

/// Copies sample b out of a batched (B,...) tensor, dropping the lead axis.
inline Tensor slice_sample_tensor(const Tensor& t, int b) {
    if (t.rank() < 2 || b < 0 || b >= t.dim(0))
        throw std::invalid_argument("slice_sample_tensor: index " + std::to_string(b) +
                                    " invalid for shape " + t.shape_str());
    Tensor out(std::vector<int>(t.shape.begin() + 1, t.shape.end()));
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = t[b * n + i];
    return out;
}

/// Round every entry to the nearest single-precision value (in place).
/// Parameters and serialized maps live on the f32 grid so that the on-disk
/// formats (which store f32) round-trip bit-exactly.
inline void quantize_f32(Tensor& t) {
    for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace dpdepth
