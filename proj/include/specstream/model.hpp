#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "specstream/attention.hpp"
#include "specstream/config.hpp"
#include "specstream/errors.hpp"
#include "specstream/kv_cache.hpp"
#include "specstream/tensor.hpp"
#include "specstream/tree.hpp"
#include "specstream/weights.hpp"

namespace specstream {

/// Multiply-add counter, split by whether the work is attributable to the
/// main stream or to speculative streams. Attention terms are counted as the
/// dense [queries x keys] rectangle a batched implementation would compute.
struct MulAdds {
    std::uint64_t main_ops = 0;
    std::uint64_t stream_ops = 0;

    std::uint64_t total() const { return main_ops + stream_ops; }
    MulAdds& operator+=(const MulAdds& o) {
        main_ops += o.main_ops;
        stream_ops += o.stream_ops;
        return *this;
    }
};

enum class StreamRequest { kNone, kLast, kAll };

struct ForwardOptions {
    StreamRequest streams = StreamRequest::kAll;
    double tau = 0.0;  // pruning threshold; 0 disables the pruning layer
    int gamma = -1;    // streams to run; -1 means the config's full count
};

template <typename T>
struct ForwardOutput {
    /// Logits for every surviving node, [nodes x v].
    Tensor<T> main_logits;
    /// Stream logits, node-major: row sel_pos * gamma + (j - 1), [sel*gamma x v].
    Tensor<T> stream_logits;
    /// Post-prune node indices that carry stream rows (into `tree`).
    std::vector<int> stream_nodes;
    /// The tree the upper layers actually processed (== input when no pruning).
    TreeDraft tree;
    /// kept[new index] = node index in the input tree.
    std::vector<int> kept;
    std::size_t pruned_nodes = 0;
    int gamma = 0;
    MulAdds muladds;

    std::span<const T> stream_row(std::size_t sel_pos, int stream_j) const {
        return stream_logits.row_span(sel_pos * static_cast<std::size_t>(gamma) +
                                      static_cast<std::size_t>(stream_j - 1));
    }
};

/// Extend a node-level tree mask to multi-stream rows/columns. Row layout is
/// [node mains | node-major stream rows for `sel`]; columns likewise. A
/// stream row j of node t keeps the node's own view of committed positions
/// and ancestors, sees streams 1..j of the same node, and nothing else; main
/// rows never see stream columns.
template <typename T>
Tensor<T> build_msa_mask(const Tensor<T>& node_mask, const std::vector<int>& sel, int gamma) {
    const std::size_t n = node_mask.rows();
    const std::size_t base_cols = node_mask.cols();
    const std::size_t s = sel.size();
    const std::size_t g = static_cast<std::size_t>(gamma);
    Tensor<T> mask = Tensor<T>::filled({n + s * g, base_cols + s * g}, neg_inf<T>());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < base_cols; ++c) mask(i, c) = node_mask(i, c);
    }
    for (std::size_t q = 0; q < s; ++q) {
        for (std::size_t j = 0; j < g; ++j) {
            const std::size_t r = n + q * g + j;
            const auto node = static_cast<std::size_t>(sel[q]);
            for (std::size_t c = 0; c < base_cols; ++c) mask(r, c) = node_mask(node, c);
            for (std::size_t jp = 0; jp <= j; ++jp) mask(r, base_cols + q * g + jp) = T(0);
        }
    }
    return mask;
}

template <typename T>
struct LayerResult {
    Tensor<T> hidden;        // updated main-row states [n x h]
    Tensor<T> stream_hidden; // updated stream states [s*gamma x h] (MSA only)
    Tensor<T> k_new, v_new;  // main-row projections to cache, [n x h]
};

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, ModelWeights<T> weights)
        : cfg_(std::move(cfg)), w_(std::move(weights)) {
        cfg_.validate();
        check_weight_shapes();
    }

    const ModelConfig& config() const { return cfg_; }
    const ModelWeights<T>& weights() const { return w_; }
    ModelWeights<T>& mutable_weights() { return w_; }

    KVCache<T> make_cache() const {
        return KVCache<T>(cfg_.num_layers, static_cast<std::size_t>(cfg_.max_seq_len),
                          static_cast<std::size_t>(cfg_.hidden_size));
    }

    /// One pre-norm decoder block over main rows only. Keys/values are the
    /// committed context plus this call's own projections; the latter are
    /// returned for the caller to cache.
    LayerResult<T> mha_layer(int layer, const Tensor<T>& x, RowsView<T> k_ctx, RowsView<T> v_ctx,
                             const Tensor<T>& mask, MulAdds* ops = nullptr) const {
        const std::size_t n = x.rows();
        const auto& lw = w_.layers.at(static_cast<std::size_t>(layer));
        if (k_ctx.count != v_ctx.count || mask.cols() != k_ctx.count + n) {
            throw ShapeError("mha_layer: context/mask length mismatch");
        }
        Tensor<T> ln1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias, kLnEps);
        Tensor<T> q = matmul(ln1, lw.wq);
        Tensor<T> k_new = matmul(ln1, lw.wk);
        Tensor<T> v_new = matmul(ln1, lw.wv);
        const std::size_t kv_rows = k_ctx.count + n;
        auto key_at = [&](std::size_t j) {
            return j < k_ctx.count ? k_ctx.row(j) : k_new.row(j - k_ctx.count);
        };
        auto val_at = [&](std::size_t j) {
            return j < v_ctx.count ? v_ctx.row(j) : v_new.row(j - v_ctx.count);
        };
        Tensor<T> ctx = detail::masked_attention(q, kv_rows, key_at, val_at, mask, cfg_.num_heads);
        Tensor<T> hidden = add(x, matmul(ctx, lw.wo));
        Tensor<T> ln2 = layer_norm(hidden, lw.ln2_gain, lw.ln2_bias, kLnEps);
        hidden = add(hidden, matmul(gelu(matmul(ln2, lw.w1)), lw.w2));
        if (ops != nullptr) ops->main_ops += block_row_cost(kv_rows) * n;
        return LayerResult<T>{std::move(hidden), Tensor<T>{}, std::move(k_new), std::move(v_new)};
    }

    /// Speculative stream states at the split layer: f_eta(M) + P_j in
    /// stream-embedding mode (identity f when the rank sentinel is 0), plain
    /// copies of M in value-rotation mode. Output is node-major [sel*gamma x h].
    Tensor<T> init_streams(const Tensor<T>& m_rows, int gamma, MulAdds* ops = nullptr) const {
        const std::size_t n = m_rows.rows();
        const std::size_t h = m_rows.cols();
        const std::size_t g = static_cast<std::size_t>(gamma);
        Tensor<T> base;
        if (cfg_.stream_mode == StreamMode::kEmbedding && cfg_.stream_init_rank > 0) {
            base = matmul(matmul(m_rows, w_.stream_init_a), w_.stream_init_b);
            if (ops != nullptr) {
                ops->stream_ops += 2ull * n * h * static_cast<std::size_t>(cfg_.stream_init_rank);
            }
        } else {
            base = m_rows;
        }
        Tensor<T> s({n * g, h});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < g; ++j) {
                T* row = s.row(i * g + j);
                const T* src = base.row(i);
                if (cfg_.stream_mode == StreamMode::kEmbedding) {
                    const auto& pj = w_.stream_embeddings.at(j);
                    for (std::size_t c = 0; c < h; ++c) row[c] = src[c] + pj[c];
                } else {
                    for (std::size_t c = 0; c < h; ++c) row[c] = src[c];
                }
            }
        }
        return s;
    }

    /// One multi-stream pre-norm block: main rows behave exactly as in
    /// mha_layer; stream j of a node attends the node's committed+ancestor
    /// context plus streams 1..j of the same node. Only main-row K/V are
    /// returned for caching; stream projections are transient.
    LayerResult<T> msa_layer(int layer, const Tensor<T>& x_main, const Tensor<T>& s_rows,
                             const std::vector<int>& sel, int gamma, RowsView<T> k_ctx,
                             RowsView<T> v_ctx, const Tensor<T>& ext_mask,
                             MulAdds* ops = nullptr) const {
        const std::size_t n = x_main.rows();
        const std::size_t h = x_main.cols();
        const std::size_t g = static_cast<std::size_t>(gamma);
        const std::size_t sg = sel.size() * g;
        if (s_rows.size() != sg * h && !(sg == 0 && s_rows.empty())) {
            throw ShapeError("msa_layer: stream rows shape mismatch");
        }
        const std::size_t rows = n + sg;
        const std::size_t kv_rows = k_ctx.count + rows;
        if (ext_mask.rows() != rows || ext_mask.cols() != kv_rows) {
            throw ShapeError("msa_layer: mask shape mismatch");
        }
        const auto& lw = w_.layers.at(static_cast<std::size_t>(layer));
        Tensor<T> all({rows, h});
        std::copy(x_main.data().begin(), x_main.data().end(), all.data().begin());
        if (sg > 0) {
            std::copy(s_rows.data().begin(), s_rows.data().end(), all.row(n));
        }
        Tensor<T> ln1 = layer_norm(all, lw.ln1_gain, lw.ln1_bias, kLnEps);
        Tensor<T> q = matmul(ln1, lw.wq);
        Tensor<T> k_all = matmul(ln1, lw.wk);
        Tensor<T> v_all = matmul(ln1, lw.wv);
        if (cfg_.stream_mode == StreamMode::kRotation && cfg_.rotation_step != 0.0) {
            for (std::size_t q_i = 0; q_i < sel.size(); ++q_i) {
                for (std::size_t j = 0; j < g; ++j) {
                    detail::rotate_row(v_all.row(n + q_i * g + j), h,
                                       cfg_.rotation_step * static_cast<double>(j + 1));
                }
            }
        }
        auto key_at = [&](std::size_t j) {
            return j < k_ctx.count ? k_ctx.row(j) : k_all.row(j - k_ctx.count);
        };
        auto val_at = [&](std::size_t j) {
            return j < v_ctx.count ? v_ctx.row(j) : v_all.row(j - v_ctx.count);
        };
        Tensor<T> ctx = detail::masked_attention(q, kv_rows, key_at, val_at, ext_mask, cfg_.num_heads);
        Tensor<T> hidden = add(all, matmul(ctx, lw.wo));
        Tensor<T> ln2 = layer_norm(hidden, lw.ln2_gain, lw.ln2_bias, kLnEps);
        hidden = add(hidden, matmul(gelu(matmul(ln2, lw.w1)), lw.w2));
        if (ops != nullptr) {
            ops->main_ops += block_row_cost(kv_rows) * n;
            ops->stream_ops += block_row_cost(kv_rows) * sg;
        }
        LayerResult<T> res;
        res.hidden = hidden.slice_rows(0, n);
        if (sg > 0) res.stream_hidden = hidden.slice_rows(n, sg);
        res.k_new = k_all.slice_rows(0, n);
        res.v_new = v_all.slice_rows(0, n);
        return res;
    }

    /// Early-exit distribution at the split layer: softmax(H(o_theta(M))).
    Tensor<T> early_exit_probs(const Tensor<T>& m_rows, MulAdds* ops = nullptr) const {
        Tensor<T> logits = early_exit_logits(m_rows, ops);
        return softmax_rows(logits);
    }

    Tensor<T> early_exit_logits(const Tensor<T>& m_rows, MulAdds* ops = nullptr) const {
        Tensor<T> adapted = matmul(matmul(m_rows, w_.prune_adapter_a), w_.prune_adapter_b);
        Tensor<T> logits = matmul(adapted, w_.lm_head);
        if (ops != nullptr) {
            const std::size_t n = m_rows.rows();
            ops->main_ops += n * (2ull * static_cast<std::size_t>(cfg_.hidden_size) *
                                      static_cast<std::size_t>(cfg_.prune_adapter_rank) +
                                  head_row_cost());
        }
        return logits;
    }

    /// One pass over a flattened tree (or causal chain): MHA layers on main
    /// rows, optional early-exit pruning at the split, stream initialization,
    /// MSA layers, then logits. K/V rows are appended to `cache` for every
    /// layer (all nodes below the split, survivors above it); committing is
    /// the caller's call.
    ForwardOutput<T> forward(KVCache<T>& cache, const TreeDraft& tree,
                             const ForwardOptions& opts = {}) const {
        const std::size_t n = tree.size();
        if (n == 0) throw ParamError("forward: empty tree");
        if (tree.committed_length != cache.committed_length()) {
            throw LogicError("forward: tree was built against a different committed length");
        }
        const int gamma = opts.gamma < 0 ? cfg_.num_streams : opts.gamma;
        if (gamma > cfg_.num_streams) {
            throw ParamError("forward: gamma exceeds the model's stream count");
        }
        const std::size_t committed = cache.committed_length();
        const auto h = static_cast<std::size_t>(cfg_.hidden_size);
        for (const auto& node : tree.nodes) {
            if (node.token < 0 || node.token >= cfg_.vocab_size) {
                throw ParamError("forward: token id out of range");
            }
            if (committed + static_cast<std::size_t>(node.depth) >=
                static_cast<std::size_t>(cfg_.max_seq_len)) {
                throw CapacityError("forward: sequence exceeds max length " +
                                    std::to_string(cfg_.max_seq_len));
            }
        }

        ForwardOutput<T> out;
        out.gamma = gamma;

        // Token + absolute position embeddings; a node's position is
        // committed length + depth in the tree.
        Tensor<T> x({n, h});
        for (std::size_t i = 0; i < n; ++i) {
            const auto& node = tree.nodes[i];
            const T* te = w_.tok_embedding.row(static_cast<std::size_t>(node.token));
            const T* pe = w_.pos_embedding.row(committed + static_cast<std::size_t>(node.depth));
            T* row = x.row(i);
            for (std::size_t c = 0; c < h; ++c) row[c] = te[c] + pe[c];
        }

        std::vector<int> all_ids(n);
        for (std::size_t i = 0; i < n; ++i) all_ids[i] = static_cast<int>(i);
        Tensor<T> node_mask = convert<T>(tree.mask);

        const int split = cfg_.split_layer();
        for (int l = 0; l < split; ++l) {
            auto res = mha_layer(l, x, ctx_keys(cache, l), ctx_values(cache, l), node_mask,
                                 &out.muladds);
            cache.append_speculative(l, res.k_new, res.v_new, all_ids);
            x = std::move(res.hidden);
        }

        // Tree pruning on early-exit transition probabilities, before stream
        // insertion. Lower-layer cache rows of pruned nodes stay in place and
        // are cleaned up lazily at commit time.
        out.tree = tree;
        out.kept = all_ids;
        if (opts.tau > 0.0 && n > 1) {
            Tensor<T> probs = early_exit_probs(x, &out.muladds);
            PruneResult pr = prune(out.tree, probs, opts.tau);
            out.pruned_nodes = n - pr.tree.size();
            if (out.pruned_nodes > 0) {
                Tensor<T> x2({pr.tree.size(), h});
                for (std::size_t i = 0; i < pr.tree.size(); ++i) {
                    std::copy(x.row(static_cast<std::size_t>(pr.kept[i])),
                              x.row(static_cast<std::size_t>(pr.kept[i])) + h, x2.row(i));
                }
                x = std::move(x2);
                node_mask = convert<T>(pr.tree.mask);
                out.tree = std::move(pr.tree);
                out.kept = std::move(pr.kept);
            }
        }
        const std::size_t n_s = out.tree.size();
        std::vector<int> surv_ids(out.kept.begin(), out.kept.end());

        if (gamma > 0 && opts.streams != StreamRequest::kNone) {
            if (opts.streams == StreamRequest::kAll) {
                out.stream_nodes.resize(n_s);
                for (std::size_t i = 0; i < n_s; ++i) out.stream_nodes[i] = static_cast<int>(i);
            } else {
                out.stream_nodes = {static_cast<int>(n_s) - 1};
            }
        }
        Tensor<T> s_rows;
        if (!out.stream_nodes.empty()) {
            Tensor<T> m_sel({out.stream_nodes.size(), h});
            for (std::size_t i = 0; i < out.stream_nodes.size(); ++i) {
                std::copy(x.row(static_cast<std::size_t>(out.stream_nodes[i])),
                          x.row(static_cast<std::size_t>(out.stream_nodes[i])) + h, m_sel.row(i));
            }
            s_rows = init_streams(m_sel, gamma, &out.muladds);
        }

        Tensor<T> ext_mask = build_msa_mask(node_mask, out.stream_nodes, gamma);
        for (int l = split; l < cfg_.num_layers; ++l) {
            auto res = msa_layer(l, x, s_rows, out.stream_nodes, gamma, ctx_keys(cache, l),
                                 ctx_values(cache, l), ext_mask, &out.muladds);
            cache.append_speculative(l, res.k_new, res.v_new, surv_ids);
            x = std::move(res.hidden);
            s_rows = std::move(res.stream_hidden);
        }

        out.main_logits = matmul(layer_norm(x, w_.ln_f_gain, w_.ln_f_bias, kLnEps), w_.lm_head);
        out.muladds.main_ops += n_s * head_row_cost();
        if (!s_rows.empty()) {
            out.stream_logits =
                matmul(layer_norm(s_rows, w_.ln_f_gain, w_.ln_f_bias, kLnEps), w_.lm_head);
            out.muladds.stream_ops += s_rows.rows() * head_row_cost();
        }
        for (std::size_t i = 0; i < out.main_logits.size(); ++i) {
            if (!std::isfinite(out.main_logits[i])) {
                throw LogicError("forward: non-finite logits (corrupt weights?)");
            }
        }
        return out;
    }

    /// Extra parameters beyond the plain decoder.
    std::size_t extra_param_count() const {
        return total_param_count(cfg_, w_) - base_param_count(cfg_);
    }

    static constexpr T kLnEps = static_cast<T>(1e-5);

private:
    std::uint64_t block_row_cost(std::size_t kv_rows) const {
        const auto h = static_cast<std::uint64_t>(cfg_.hidden_size);
        return 12 * h * h + 2 * static_cast<std::uint64_t>(kv_rows) * h;
    }
    std::uint64_t head_row_cost() const {
        return static_cast<std::uint64_t>(cfg_.hidden_size) *
               static_cast<std::uint64_t>(cfg_.vocab_size);
    }

    RowsView<T> ctx_keys(const KVCache<T>& cache, int layer) const {
        return rows_view(cache.keys(layer), cache.committed_length());
    }
    RowsView<T> ctx_values(const KVCache<T>& cache, int layer) const {
        return rows_view(cache.values(layer), cache.committed_length());
    }

    void check_weight_shapes() const {
        ModelWeights<T> expected = make_zero_weights<T>(cfg_);
        std::vector<std::pair<std::string, std::vector<std::size_t>>> want, got;
        for_each_tensor(cfg_, expected, [&](const std::string& name, const Tensor<T>& t) {
            want.emplace_back(name, t.shape());
        });
        for_each_tensor(cfg_, w_, [&](const std::string& name, const Tensor<T>& t) {
            got.emplace_back(name, t.shape());
        });
        if (want != got) throw LoadError("model weights do not match config-implied shapes");
    }

    ModelConfig cfg_;
    ModelWeights<T> w_;
};

template <typename T>
Model<T> load_model(const ModelConfig& cfg, const nlohmann::json& manifest,
                    const std::vector<std::uint8_t>& blob) {
    return Model<T>(cfg, load_weights<T>(cfg, manifest, blob));
}

}  // namespace specstream
