#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "specstream/errors.hpp"

namespace specstream {

/// Dense row-major tensor. Immutable by convention once handed to a consumer;
/// operations below are pure functions. T is float (f32 mode) or double
/// (f64 mode, used for gradient checking).
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(element_count(shape_), T(0));
    }

    Tensor(std::vector<std::size_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != element_count(shape_)) {
            throw ShapeError("tensor data length does not match shape");
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor filled(std::vector<std::size_t> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const {
        require_2d();
        return shape_[0];
    }
    std::size_t cols() const {
        require_2d();
        return shape_[1];
    }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    T& operator[](std::size_t i) { return data_[i]; }
    T operator[](std::size_t i) const { return data_[i]; }

    T* row(std::size_t r) { return data_.data() + r * shape_[1]; }
    const T* row(std::size_t r) const { return data_.data() + r * shape_[1]; }
    std::span<const T> row_span(std::size_t r) const { return {row(r), shape_[1]}; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Copy rows [start, start+count) into a new tensor.
    Tensor slice_rows(std::size_t start, std::size_t count) const {
        require_2d();
        if (start + count > shape_[0]) throw ShapeError("slice_rows out of range");
        Tensor out({count, shape_[1]});
        std::copy(row(start), row(start) + count * shape_[1], out.data_.data());
        return out;
    }

    static std::size_t element_count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    void require_2d() const {
        if (shape_.size() != 2) throw ShapeError("expected 2-d tensor");
    }

    std::vector<std::size_t> shape_;
    std::vector<T> data_;
};

template <typename T, typename U>
Tensor<T> convert(const Tensor<U>& src) {
    Tensor<T> out(src.shape());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<T>(src[i]);
    return out;
}

/// Matrix product a[m×k] · b[k×n]. Accumulates in double with k ascending for
/// every output cell, so results are bit-identical to a naive triple loop
/// (exactly, in f64 mode) no matter how the loops are arranged.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw ShapeError("matmul: incompatible shapes");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out({m, n});
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* arow = a.row(i);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = static_cast<double>(arow[p]);
            const T* brow = b.row(p);
            for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(brow[j]);
        }
        T* orow = out.row(i);
        for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
    }
    return out;
}

/// a[m×k] · bᵀ where b is [n×k]; same accumulation contract as matmul.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: incompatible shapes");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.row(j);
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
            }
            out(i, j) = static_cast<T>(acc);
        }
    }
    return out;
}

namespace detail {

template <typename T>
inline bool mask_allows(T m) {
    if (m == T(0)) return true;
    if (std::isinf(m) && m < T(0)) return false;
    throw ParamError("additive mask entries must be 0 or -inf");
}

}  // namespace detail

/// Row-wise softmax(scores + mask). Masked-out entries are exactly 0 in the
/// result; a fully masked row is an error (every attention row must see at
/// least one key).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& scores, const Tensor<T>& mask) {
    if (!scores.same_shape(mask)) throw ShapeError("softmax_rows: scores/mask shape mismatch");
    const std::size_t r = scores.rows(), c = scores.cols();
    Tensor<T> out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        const T* srow = scores.row(i);
        const T* mrow = mask.row(i);
        double maxv = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < c; ++j) {
            if (detail::mask_allows(mrow[j])) {
                any = true;
                maxv = std::max(maxv, static_cast<double>(srow[j]));
            }
        }
        if (!any) throw ParamError("softmax_rows: fully masked row " + std::to_string(i));
        double denom = 0.0;
        T* orow = out.row(i);
        for (std::size_t j = 0; j < c; ++j) {
            if (mrow[j] == T(0)) {
                const double e = std::exp(static_cast<double>(srow[j]) - maxv);
                orow[j] = static_cast<T>(e);
                denom += e;
            } else {
                orow[j] = T(0);
            }
        }
        for (std::size_t j = 0; j < c; ++j) {
            if (mrow[j] == T(0)) orow[j] = static_cast<T>(static_cast<double>(orow[j]) / denom);
        }
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& scores) {
    return softmax_rows(scores, Tensor<T>::zeros(scores.shape()));
}

/// Per-row normalization to zero mean / unit variance, then affine gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (x.ndim() != 2) throw ShapeError("layer_norm: expected 2-d input");
    const std::size_t r = x.rows(), d = x.cols();
    if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: gain/bias length");
    if (!(eps > T(0))) throw ParamError("layer_norm: eps must be positive");
    Tensor<T> out({r, d});
    for (std::size_t i = 0; i < r; ++i) {
        const T* xr = x.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += static_cast<double>(xr[j]);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double dv = static_cast<double>(xr[j]) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        T* orow = out.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double nv = (static_cast<double>(xr[j]) - mean) * inv;
            orow[j] = static_cast<T>(nv * static_cast<double>(gain[j]) + static_cast<double>(bias[j]));
        }
    }
    return out;
}

/// tanh-approximation GELU.
template <typename T>
inline T gelu_scalar(T x) {
    const double xd = static_cast<double>(x);
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    const double inner = kC * (xd + 0.044715 * xd * xd * xd);
    return static_cast<T>(0.5 * xd * (1.0 + std::tanh(inner)));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

/// Index of the largest entry; ties broken by lowest index.
template <typename T>
int argmax(std::span<const T> v) {
    if (v.empty()) throw ParamError("argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return static_cast<int>(best);
}

/// The k largest entries of a logit vector as (token id, logit), sorted by
/// descending logit; ties broken by lowest token id.
template <typename T>
std::vector<std::pair<int, T>> topk(std::span<const T> logits, int k) {
    const int v = static_cast<int>(logits.size());
    if (k < 1 || k > v) throw ParamError("topk: k out of range");
    std::vector<int> idx(logits.size());
    for (int i = 0; i < v; ++i) idx[static_cast<std::size_t>(i)] = i;
    auto better = [&](int a, int b) {
        if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]) {
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
        }
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    std::vector<std::pair<int, T>> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        out.emplace_back(idx[static_cast<std::size_t>(i)], logits[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
    }
    return out;
}

template <typename T>
std::vector<std::pair<int, T>> topk(const Tensor<T>& logits, int k) {
    if (logits.ndim() != 1) throw ShapeError("topk: expected 1-d logits");
    return topk(std::span<const T>(logits.data().data(), logits.size()), k);
}

template <typename T>
constexpr T neg_inf() {
    return -std::numeric_limits<T>::infinity();
}

}  // namespace specstream
