#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "specstream/attention.hpp"
#include "specstream/errors.hpp"
#include "specstream/tensor.hpp"

namespace specstream::ad {

/// Reverse-mode tape over the same deterministic kernels the inference path
/// uses, so teacher-forced logits match Model::forward bit for bit. Values
/// are computed eagerly at op-construction time; backward() replays the tape
/// in reverse with fixed accumulation order.
template <typename T>
class Tape {
public:
    using Id = int;

    Id leaf(Tensor<T> value, bool needs_grad = true) {
        return push(std::move(value), needs_grad, {});
    }

    Id constant(Tensor<T> value) { return push(std::move(value), false, {}); }

    const Tensor<T>& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    const Tensor<T>& grad(Id id) const {
        const auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() != n.value.size()) {
            throw LogicError("grad read before backward (or for a no-grad node)");
        }
        return n.grad;
    }

    Id matmul(Id a, Id b) {
        Tensor<T> out = specstream::matmul(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Tensor<T>& g) {
            if (needs(a)) accumulate(a, matmul_nt(g, value(b)));
            if (needs(b)) accumulate(b, matmul_tn(value(a), g));
        });
    }

    Id add(Id a, Id b) {
        Tensor<T> out = specstream::add(value(a), value(b));
        return push(std::move(out), needs(a) || needs(b), [this, a, b](const Tensor<T>& g) {
            if (needs(a)) accumulate(a, g);
            if (needs(b)) accumulate(b, g);
        });
    }

    /// x [r x c] plus a length-c vector added to every row.
    Id add_row_broadcast(Id x, Id vec) {
        const auto& xv = value(x);
        const auto& vv = value(vec);
        if (xv.cols() != vv.size()) throw ShapeError("add_row_broadcast: length mismatch");
        Tensor<T> out(xv.shape());
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            const T* xr = xv.row(i);
            T* orow = out.row(i);
            for (std::size_t c = 0; c < xv.cols(); ++c) orow[c] = xr[c] + vv[c];
        }
        return push(std::move(out), needs(x) || needs(vec), [this, x, vec](const Tensor<T>& g) {
            if (needs(x)) accumulate(x, g);
            if (needs(vec)) {
                Tensor<T> gv(value(vec).shape());
                for (std::size_t i = 0; i < g.rows(); ++i) {
                    const T* gr = g.row(i);
                    for (std::size_t c = 0; c < g.cols(); ++c) gv[c] += gr[c];
                }
                accumulate(vec, gv);
            }
        });
    }

    Id gather_rows(Id table, std::vector<int> idx) {
        const auto& tv = value(table);
        Tensor<T> out({idx.size(), tv.cols()});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy(tv.row(static_cast<std::size_t>(idx[i])),
                      tv.row(static_cast<std::size_t>(idx[i])) + tv.cols(), out.row(i));
        }
        return push(std::move(out), needs(table),
                    [this, table, idx = std::move(idx)](const Tensor<T>& g) {
                        if (!needs(table)) return;
                        Tensor<T> gt(value(table).shape());
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            T* dst = gt.row(static_cast<std::size_t>(idx[i]));
                            const T* src = g.row(i);
                            for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += src[c];
                        }
                        accumulate(table, gt);
                    });
    }

    Id slice_rows(Id a, std::size_t start, std::size_t count) {
        Tensor<T> out = value(a).slice_rows(start, count);
        return push(std::move(out), needs(a), [this, a, start, count](const Tensor<T>& g) {
            if (!needs(a)) return;
            Tensor<T> ga(value(a).shape());
            for (std::size_t i = 0; i < count; ++i) {
                std::copy(g.row(i), g.row(i) + g.cols(), ga.row(start + i));
            }
            accumulate(a, ga);
        });
    }

    Id concat_rows(const std::vector<Id>& parts) {
        std::size_t rows = 0;
        const std::size_t cols = value(parts.front()).cols();
        for (Id p : parts) rows += value(p).rows();
        Tensor<T> out({rows, cols});
        std::size_t at = 0;
        for (Id p : parts) {
            const auto& pv = value(p);
            std::copy(pv.data().begin(), pv.data().end(), out.row(at));
            at += pv.rows();
        }
        bool any = false;
        for (Id p : parts) any = any || needs(p);
        return push(std::move(out), any, [this, parts](const Tensor<T>& g) {
            std::size_t at = 0;
            for (Id p : parts) {
                const std::size_t r = value(p).rows();
                if (needs(p)) accumulate(p, g.slice_rows(at, r));
                at += r;
            }
        });
    }

    /// Same math as specstream::layer_norm; keeps the normalized rows and
    /// inverse stddev for the backward pass.
    Id layer_norm(Id x, Id gain, Id bias, T eps) {
        const auto& xv = value(x);
        const auto& gv = value(gain);
        const auto& bv = value(bias);
        const std::size_t r = xv.rows(), d = xv.cols();
        auto xhat = std::make_shared<Tensor<double>>(Tensor<double>({r, d}));
        auto invstd = std::make_shared<std::vector<double>>(r);
        Tensor<T> out({r, d});
        for (std::size_t i = 0; i < r; ++i) {
            const T* xr = xv.row(i);
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
            (*invstd)[i] = inv;
            T* orow = out.row(i);
            for (std::size_t j = 0; j < d; ++j) {
                const double nv = (static_cast<double>(xr[j]) - mean) * inv;
                (*xhat)(i, j) = nv;
                orow[j] = static_cast<T>(nv * static_cast<double>(gv[j]) + static_cast<double>(bv[j]));
            }
        }
        return push(std::move(out), needs(x) || needs(gain) || needs(bias),
                    [this, x, gain, bias, xhat, invstd](const Tensor<T>& g) {
                        const auto& gv = value(gain);
                        const std::size_t r = g.rows(), d = g.cols();
                        Tensor<T> gx(value(x).shape());
                        Tensor<T> gg(value(gain).shape());
                        Tensor<T> gb(value(bias).shape());
                        for (std::size_t i = 0; i < r; ++i) {
                            const T* grow = g.row(i);
                            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dxh = static_cast<double>(grow[j]) *
                                                   static_cast<double>(gv[j]);
                                mean_dxhat += dxh;
                                mean_dxhat_xhat += dxh * (*xhat)(i, j);
                            }
                            mean_dxhat /= static_cast<double>(d);
                            mean_dxhat_xhat /= static_cast<double>(d);
                            T* gxr = gx.row(i);
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dxh = static_cast<double>(grow[j]) *
                                                   static_cast<double>(gv[j]);
                                gxr[j] = static_cast<T>(
                                    (*invstd)[i] *
                                    (dxh - mean_dxhat - (*xhat)(i, j) * mean_dxhat_xhat));
                                gg[j] += static_cast<T>(static_cast<double>(grow[j]) * (*xhat)(i, j));
                                gb[j] += grow[j];
                            }
                        }
                        if (needs(x)) accumulate(x, gx);
                        if (needs(gain)) accumulate(gain, gg);
                        if (needs(bias)) accumulate(bias, gb);
                    });
    }

    Id gelu(Id x) {
        Tensor<T> out = specstream::gelu(value(x));
        return push(std::move(out), needs(x), [this, x](const Tensor<T>& g) {
            if (!needs(x)) return;
            const auto& xv = value(x);
            Tensor<T> gx(xv.shape());
            constexpr double kC = 0.7978845608028654;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const double xd = static_cast<double>(xv[i]);
                const double u = kC * (xd + 0.044715 * xd * xd * xd);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * 0.044715 * xd * xd);
                const double dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du;
                gx[i] = static_cast<T>(static_cast<double>(g[i]) * dy);
            }
            accumulate(x, gx);
        });
    }

    /// Multi-head attention over full-row keys/values with a constant
    /// additive mask; forward goes through the shared masked_attention kernel.
    Id attend(Id q, Id k, Id v, std::shared_ptr<const Tensor<T>> mask, int heads) {
        const auto& qv = value(q);
        const auto& kv = value(k);
        const auto& vv = value(v);
        auto probs = std::make_shared<Tensor<T>>();
        auto key_at = [&](std::size_t j) { return kv.row(j); };
        auto val_at = [&](std::size_t j) { return vv.row(j); };
        Tensor<T> ctx =
            detail::masked_attention(qv, kv.rows(), key_at, val_at, *mask, heads, probs.get());
        return push(std::move(ctx), needs(q) || needs(k) || needs(v),
                    [this, q, k, v, probs, heads](const Tensor<T>& g) {
                        backward_attend(q, k, v, *probs, heads, g);
                    });
    }

    /// Rotate coordinate pairs of each row by a fixed per-row angle
    /// (0 leaves the row untouched). Linear, so backward rotates by -angle.
    Id rotate_rows(Id x, std::vector<double> angles) {
        Tensor<T> out = value(x);
        if (angles.size() != out.rows()) throw ShapeError("rotate_rows: one angle per row");
        for (std::size_t i = 0; i < out.rows(); ++i) {
            if (angles[i] != 0.0) detail::rotate_row(out.row(i), out.cols(), angles[i]);
        }
        return push(std::move(out), needs(x),
                    [this, x, angles = std::move(angles)](const Tensor<T>& g) {
                        if (!needs(x)) return;
                        Tensor<T> gx = g;
                        for (std::size_t i = 0; i < gx.rows(); ++i) {
                            if (angles[i] != 0.0) detail::rotate_row(gx.row(i), gx.cols(), -angles[i]);
                        }
                        accumulate(x, gx);
                    });
    }

    /// Weighted negative log-likelihood: sum_i w_i * (-log softmax(row_i)[t_i])
    /// as a [1] scalar. Rows with weight 0 (or target -1) are skipped.
    Id nll(Id logits, std::vector<int> targets, std::vector<double> weights) {
        const auto& lv = value(logits);
        if (targets.size() != lv.rows() || weights.size() != lv.rows()) {
            throw ShapeError("nll: one target and weight per row");
        }
        double total = 0.0;
        for (std::size_t i = 0; i < lv.rows(); ++i) {
            if (weights[i] == 0.0 || targets[i] < 0) continue;
            total += weights[i] * row_nll(lv, i, targets[i]);
        }
        Tensor<T> out({1});
        out[0] = static_cast<T>(total);
        return push(std::move(out), needs(logits),
                    [this, logits, targets = std::move(targets),
                     weights = std::move(weights)](const Tensor<T>& g) {
                        if (!needs(logits)) return;
                        const auto& lv = value(logits);
                        const double seed = static_cast<double>(g[0]);
                        Tensor<T> gl(lv.shape());
                        for (std::size_t i = 0; i < lv.rows(); ++i) {
                            if (weights[i] == 0.0 || targets[i] < 0) continue;
                            const T* row = lv.row(i);
                            double maxv = static_cast<double>(row[0]);
                            for (std::size_t c = 1; c < lv.cols(); ++c) {
                                maxv = std::max(maxv, static_cast<double>(row[c]));
                            }
                            double denom = 0.0;
                            for (std::size_t c = 0; c < lv.cols(); ++c) {
                                denom += std::exp(static_cast<double>(row[c]) - maxv);
                            }
                            const double scale = seed * weights[i];
                            T* grow = gl.row(i);
                            for (std::size_t c = 0; c < lv.cols(); ++c) {
                                double p = std::exp(static_cast<double>(row[c]) - maxv) / denom;
                                if (static_cast<int>(c) == targets[i]) p -= 1.0;
                                grow[c] = static_cast<T>(scale * p);
                            }
                        }
                        accumulate(logits, gl);
                    });
    }

    /// Scalar linear combination sum_i coeff_i * term_i ([1] each).
    Id add_scaled(std::vector<std::pair<Id, double>> terms) {
        double total = 0.0;
        bool any = false;
        for (const auto& [id, c] : terms) {
            total += c * static_cast<double>(value(id)[0]);
            any = any || needs(id);
        }
        Tensor<T> out({1});
        out[0] = static_cast<T>(total);
        return push(std::move(out), any, [this, terms = std::move(terms)](const Tensor<T>& g) {
            for (const auto& [id, c] : terms) {
                if (!needs(id)) continue;
                Tensor<T> gi({1});
                gi[0] = static_cast<T>(c * static_cast<double>(g[0]));
                accumulate(id, gi);
            }
        });
    }

    /// Seed d(root) = 1 and run the tape in reverse.
    void backward(Id root) {
        for (auto& n : nodes_) {
            if (n.needs_grad) n.grad = Tensor<T>(n.value.shape());
        }
        auto& rn = nodes_[static_cast<std::size_t>(root)];
        if (!rn.needs_grad) return;
        if (rn.value.size() != 1) throw ParamError("backward: root must be a scalar");
        rn.grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->needs_grad && it->backward) it->backward(it->grad);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        std::function<void(const Tensor<T>&)> backward;
    };

    bool needs(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    Id push(Tensor<T> value, bool needs_grad, std::function<void(const Tensor<T>&)> backward) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    void accumulate(Id id, const Tensor<T>& g) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad.same_shape(g)) throw ShapeError("gradient shape mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    static double row_nll(const Tensor<T>& logits, std::size_t row, int target) {
        const T* r = logits.row(row);
        double maxv = static_cast<double>(r[0]);
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            maxv = std::max(maxv, static_cast<double>(r[c]));
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < logits.cols(); ++c) {
            denom += std::exp(static_cast<double>(r[c]) - maxv);
        }
        const double lse = maxv + std::log(denom);
        return lse - static_cast<double>(r[static_cast<std::size_t>(target)]);
    }

    // dB for C = A.B given dC: B-gradient = A^T dC, accumulated in double.
    static Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& dc) {
        const std::size_t m = a.rows(), k = a.cols(), n = dc.cols();
        Tensor<T> out({k, n});
        std::vector<double> acc(n);
        for (std::size_t p = 0; p < k; ++p) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t i = 0; i < m; ++i) {
                const double aip = static_cast<double>(a(i, p));
                const T* drow = dc.row(i);
                for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(drow[j]);
            }
            T* orow = out.row(p);
            for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
        }
        return out;
    }

    void backward_attend(Id q, Id k, Id v, const Tensor<T>& probs, int heads, const Tensor<T>& g) {
        const auto& qv = value(q);
        const auto& kv = value(k);
        const auto& vv = value(v);
        const std::size_t n = qv.rows(), h = qv.cols();
        const std::size_t L = kv.rows();
        const std::size_t d = h / static_cast<std::size_t>(heads);
        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        Tensor<T> gq(qv.shape());
        Tensor<T> gk(kv.shape());
        Tensor<T> gv(vv.shape());
        std::vector<double> dp(L), ds(L);
        for (std::size_t i = 0; i < n; ++i) {
            for (int hd = 0; hd < heads; ++hd) {
                const std::size_t off = static_cast<std::size_t>(hd) * d;
                const T* prow = probs.row(i * static_cast<std::size_t>(heads) +
                                          static_cast<std::size_t>(hd));
                const T* grow = g.row(i);
                double sum_dp_p = 0.0;
                for (std::size_t j = 0; j < L; ++j) {
                    const double pj = static_cast<double>(prow[j]);
                    if (pj == 0.0) {
                        dp[j] = 0.0;
                        continue;
                    }
                    double dot = 0.0;
                    const T* vrow = vv.row(j);
                    for (std::size_t c = 0; c < d; ++c) {
                        dot += static_cast<double>(grow[off + c]) * static_cast<double>(vrow[off + c]);
                    }
                    dp[j] = dot;
                    sum_dp_p += dot * pj;
                }
                for (std::size_t j = 0; j < L; ++j) {
                    const double pj = static_cast<double>(prow[j]);
                    ds[j] = pj == 0.0 ? 0.0 : pj * (dp[j] - sum_dp_p);
                }
                const T* qrow = qv.row(i);
                T* gqrow = gq.row(i);
                for (std::size_t j = 0; j < L; ++j) {
                    const double pj = static_cast<double>(prow[j]);
                    if (pj == 0.0 && ds[j] == 0.0) continue;
                    const T* krow = kv.row(j);
                    const T* vrow = vv.row(j);
                    T* gkrow = gk.row(j);
                    T* gvrow = gv.row(j);
                    for (std::size_t c = 0; c < d; ++c) {
                        gqrow[off + c] += static_cast<T>(ds[j] * static_cast<double>(krow[off + c]) * scale);
                        gkrow[off + c] += static_cast<T>(ds[j] * static_cast<double>(qrow[off + c]) * scale);
                        gvrow[off + c] += static_cast<T>(pj * static_cast<double>(grow[off + c]));
                    }
                }
            }
        }
        if (needs(q)) accumulate(q, gq);
        if (needs(k)) accumulate(k, gk);
        if (needs(v)) accumulate(v, gv);
    }

    std::vector<Node> nodes_;
};

}  // namespace specstream::ad
