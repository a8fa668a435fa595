#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "specstream/errors.hpp"
#include "specstream/tensor.hpp"

namespace specstream {

/// Borrowed view of consecutive rows (e.g. the committed region of a KV
/// cache tensor).
template <typename T>
struct RowsView {
    const T* base = nullptr;
    std::size_t count = 0;
    std::size_t stride = 0;

    const T* row(std::size_t i) const { return base + i * stride; }
};

template <typename T>
RowsView<T> rows_view(const Tensor<T>& t, std::size_t count) {
    return RowsView<T>{t.row(0), count, t.cols()};
}

namespace detail {

/// Multi-head scaled dot-product attention with an additive 0/-inf mask.
/// Masked keys contribute exactly nothing. Key/value rows come through
/// accessors so callers can attend over segmented storage (cache rows plus
/// freshly projected rows) without copying. The per-row reduction order is
/// fixed (keys ascending, per head), which keeps every caller bit-identical
/// for the same inputs regardless of how rows are stored.
///
/// probs_out, when non-null, receives softmax weights as [n*heads, kv_rows]
/// (row i*heads+h), which is what the training backward pass needs.
template <typename T, typename KeyAt, typename ValAt>
Tensor<T> masked_attention(const Tensor<T>& q, std::size_t kv_rows, KeyAt&& key_at, ValAt&& val_at,
                           const Tensor<T>& mask, int heads, Tensor<T>* probs_out = nullptr) {
    const std::size_t n = q.rows();
    const std::size_t h = q.cols();
    const std::size_t d = h / static_cast<std::size_t>(heads);
    if (mask.rows() != n || mask.cols() != kv_rows) {
        throw ShapeError("masked_attention: mask must be [queries x keys]");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor<T> ctx({n, h});
    if (probs_out != nullptr) {
        *probs_out = Tensor<T>({n * static_cast<std::size_t>(heads), kv_rows});
    }
    std::vector<double> s(kv_rows);
    for (std::size_t i = 0; i < n; ++i) {
        const T* qrow = q.row(i);
        const T* mrow = mask.row(i);
        for (int hd = 0; hd < heads; ++hd) {
            const std::size_t off = static_cast<std::size_t>(hd) * d;
            double maxv = -std::numeric_limits<double>::infinity();
            bool any = false;
            for (std::size_t j = 0; j < kv_rows; ++j) {
                if (mrow[j] != T(0)) continue;
                const T* krow = key_at(j);
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dot += static_cast<double>(qrow[off + c]) * static_cast<double>(krow[off + c]);
                }
                s[j] = dot * scale;
                if (s[j] > maxv) maxv = s[j];
                any = true;
            }
            if (!any) {
                throw ParamError("masked_attention: fully masked query row " + std::to_string(i));
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < kv_rows; ++j) {
                if (mrow[j] != T(0)) continue;
                s[j] = std::exp(s[j] - maxv);
                denom += s[j];
            }
            T* crow = ctx.row(i);
            for (std::size_t c = 0; c < d; ++c) crow[off + c] = T(0);
            for (std::size_t j = 0; j < kv_rows; ++j) {
                if (mrow[j] != T(0)) continue;
                const double p = s[j] / denom;
                if (probs_out != nullptr) {
                    (*probs_out)(i * static_cast<std::size_t>(heads) + static_cast<std::size_t>(hd), j) =
                        static_cast<T>(p);
                }
                const T* vrow = val_at(j);
                for (std::size_t c = 0; c < d; ++c) {
                    crow[off + c] = static_cast<T>(static_cast<double>(crow[off + c]) +
                                                   p * static_cast<double>(vrow[off + c]));
                }
            }
        }
    }
    return ctx;
}

/// Rotate consecutive coordinate pairs of one row by `angle` radians.
template <typename T>
void rotate_row(T* row, std::size_t h, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    for (std::size_t i = 0; i + 1 < h; i += 2) {
        const double a = static_cast<double>(row[i]);
        const double b = static_cast<double>(row[i + 1]);
        row[i] = static_cast<T>(a * c - b * s);
        row[i + 1] = static_cast<T>(a * s + b * c);
    }
}

}  // namespace detail

/// Planar realization of the complex per-stream value rotation: coordinate
/// pairs (v_2i, v_2i+1) of every row turn by eps * stream_index. Norms are
/// preserved.
template <typename T>
Tensor<T> rotate_values(const Tensor<T>& v_rows, int stream_index, double eps) {
    if (v_rows.cols() % 2 != 0) throw ShapeError("rotate_values: hidden size must be even");
    if (stream_index < 1) throw ParamError("rotate_values: stream index must be >= 1");
    Tensor<T> out = v_rows;
    const double angle = eps * static_cast<double>(stream_index);
    for (std::size_t i = 0; i < out.rows(); ++i) detail::rotate_row(out.row(i), out.cols(), angle);
    return out;
}

}  // namespace specstream
