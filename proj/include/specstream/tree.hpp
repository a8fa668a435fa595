#pragma once

#include <cstddef>
#include <vector>

#include "specstream/errors.hpp"
#include "specstream/tensor.hpp"

namespace specstream {

/// Hard cap on flattened draft size (the verification batch lives in memory
/// as dense rows).
inline constexpr std::size_t kMaxTreeNodes = 4096;

struct TreeNode {
    int token = -1;
    int parent = -1;  // -1 for root
    int depth = 0;    // root = 0
    int stream = 0;   // originating stream index; 0 for the root (main stream)
};

/// A flattened speculative token tree plus its additive attention mask.
/// Nodes are in preorder, so parent < node everywhere. The mask has one row
/// per node and one column per (committed + node) position; row i is 0 on all
/// committed columns, on i's ancestor chain including the root, and on i
/// itself, and -inf elsewhere.
struct TreeDraft {
    std::vector<TreeNode> nodes;
    std::size_t committed_length = 0;
    Tensor<float> mask;  // [nodes x (committed_length + nodes)]

    std::size_t size() const { return nodes.size(); }

    bool is_ancestor_or_self(int anc, int node) const {
        for (int cur = node; cur != -1; cur = nodes[static_cast<std::size_t>(cur)].parent) {
            if (cur == anc) return true;
        }
        return false;
    }

    std::vector<int> children_of(int parent) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i].parent == parent) out.push_back(static_cast<int>(i));
        }
        return out;
    }
};

/// Tree draft size before pruning: 1 + sum_{g=1..gamma} k^g.
inline std::size_t tree_draft_size(int gamma, int k) {
    std::size_t total = 1, layer = 1;
    for (int g = 1; g <= gamma; ++g) {
        layer *= static_cast<std::size_t>(k);
        total += layer;
    }
    return total;
}

/// Verification batch size when every draft token rides with its streams:
/// (1 + gamma) * (1 + sum k^g).
inline std::size_t msa_batch_size(int gamma, int k) {
    if (gamma < 1 || k < 1) throw ParamError("msa_batch_size: gamma and k must be >= 1");
    return static_cast<std::size_t>(1 + gamma) * tree_draft_size(gamma, k);
}

/// Additive attention mask for a flattened tree over [committed | nodes]
/// columns: each node sees all committed positions, its ancestors and itself.
inline Tensor<float> build_mask(const std::vector<TreeNode>& nodes, std::size_t committed_length) {
    const std::size_t n = nodes.size();
    Tensor<float> mask({n, committed_length + n});
    for (std::size_t i = 0; i < n; ++i) {
        float* row = mask.row(i);
        for (std::size_t c = 0; c < committed_length; ++c) row[c] = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            bool allowed = false;
            for (int cur = static_cast<int>(i); cur != -1;
                 cur = nodes[static_cast<std::size_t>(cur)].parent) {
                if (cur == static_cast<int>(j)) {
                    allowed = true;
                    break;
                }
            }
            row[committed_length + j] = allowed ? 0.0f : neg_inf<float>();
        }
    }
    return mask;
}

inline Tensor<float> build_mask(const TreeDraft& tree, std::size_t committed_length) {
    return build_mask(tree.nodes, committed_length);
}

namespace detail {

inline void grow_tree(std::vector<TreeNode>& nodes, int parent, int depth, int gamma,
                      const std::vector<std::vector<int>>& level_tokens) {
    if (depth > gamma) return;
    for (int tok : level_tokens[static_cast<std::size_t>(depth - 1)]) {
        TreeNode n;
        n.token = tok;
        n.parent = parent;
        n.depth = depth;
        n.stream = depth;
        nodes.push_back(n);
        const int me = static_cast<int>(nodes.size()) - 1;
        grow_tree(nodes, me, depth + 1, gamma, level_tokens);
    }
}

}  // namespace detail

/// Build the next draft: the correction token is the root, and for each
/// depth g the top-k tokens of stream g are attached under every node of
/// depth g-1 (one top-k set per stream, replicated across parents).
template <typename T>
TreeDraft build_tree(int correction_token, const Tensor<T>& stream_logits, int k,
                     std::size_t committed_length) {
    const int gamma = stream_logits.empty() ? 0 : static_cast<int>(stream_logits.rows());
    if (gamma > 0 && k < 1) throw ParamError("build_tree: k must be >= 1");
    if (tree_draft_size(gamma, std::max(k, 1)) > kMaxTreeNodes) {
        throw CapacityError("build_tree: draft would exceed max batch of " +
                            std::to_string(kMaxTreeNodes) + " nodes");
    }
    TreeDraft tree;
    tree.committed_length = committed_length;
    tree.nodes.push_back(TreeNode{correction_token, -1, 0, 0});
    if (gamma > 0) {
        std::vector<std::vector<int>> level_tokens(static_cast<std::size_t>(gamma));
        for (int g = 0; g < gamma; ++g) {
            for (const auto& [tok, logit] : topk(stream_logits.row_span(static_cast<std::size_t>(g)), k)) {
                level_tokens[static_cast<std::size_t>(g)].push_back(tok);
            }
        }
        detail::grow_tree(tree.nodes, 0, 1, gamma, level_tokens);
    }
    tree.mask = build_mask(tree.nodes, committed_length);
    return tree;
}

struct PruneResult {
    TreeDraft tree;
    std::vector<int> kept;  // kept[new index] = index in the input tree
};

/// Drop every child whose parent's early-exit probability for the child's
/// token falls below tau, along with its subtree. The root always survives;
/// survivors keep their relative order and the mask is rebuilt.
template <typename T>
PruneResult prune(const TreeDraft& tree, const Tensor<T>& early_exit_probs, double tau) {
    if (tau < 0.0) throw ParamError("prune: tau must be >= 0");
    if (early_exit_probs.rows() != tree.size()) {
        throw ShapeError("prune: need one probability row per node");
    }
    const std::size_t n = tree.size();
    std::vector<bool> alive(n, true);
    for (std::size_t i = 1; i < n; ++i) {
        const auto& node = tree.nodes[i];
        const auto parent = static_cast<std::size_t>(node.parent);
        if (!alive[parent] ||
            static_cast<double>(early_exit_probs(parent, static_cast<std::size_t>(node.token))) < tau) {
            alive[i] = false;
        }
    }
    PruneResult out;
    out.tree.committed_length = tree.committed_length;
    std::vector<int> remap(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        if (!alive[i]) continue;
        TreeNode node = tree.nodes[i];
        if (node.parent >= 0) node.parent = remap[static_cast<std::size_t>(node.parent)];
        remap[i] = static_cast<int>(out.tree.nodes.size());
        out.tree.nodes.push_back(node);
        out.kept.push_back(static_cast<int>(i));
    }
    out.tree.mask = build_mask(out.tree.nodes, tree.committed_length);
    return out;
}

/// Causal chain over a token sequence (prompt processing and the reference
/// decoder use the tree machinery with a depth-per-token chain).
inline TreeDraft make_chain(const std::vector<int>& tokens, std::size_t committed_length) {
    if (tokens.empty()) throw ParamError("make_chain: empty token sequence");
    if (tokens.size() > kMaxTreeNodes) throw CapacityError("make_chain: sequence exceeds max batch");
    TreeDraft tree;
    tree.committed_length = committed_length;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tree.nodes.push_back(TreeNode{tokens[i], static_cast<int>(i) - 1, static_cast<int>(i), 0});
    }
    tree.mask = build_mask(tree.nodes, committed_length);
    return tree;
}

}  // namespace specstream
