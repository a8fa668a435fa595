#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "specstream/errors.hpp"
#include "specstream/model.hpp"
#include "specstream/tensor.hpp"
#include "specstream/tree.hpp"

namespace specstream {

/// Greedy decoding by default; optional temperature/top-k sampling. Sampling
/// draws per sequence position from a counter-based RNG, so the token chosen
/// for position p depends only on (seed, p, logits) and speculative decoding
/// stays equivalent to the reference decoder even when sampling.
struct SamplingParams {
    bool sample = false;
    double temperature = 1.0;
    int top_k = 0;  // 0 = full vocabulary
    std::uint64_t seed = 0;
};

struct GenerateParams {
    int gamma = -1;  // -1: use the model's full stream count
    int k = 1;
    double tau = 0.0;
    int max_new_tokens = 16;
    int eos_token = -1;  // -1: no eos
    SamplingParams sampling;
};

struct DecodeMetrics {
    std::size_t generated_tokens = 0;
    std::size_t target_calls = 0;
    std::map<int, std::size_t> beta_histogram;  // advancement per pass -> count
    std::size_t pruned_nodes = 0;
    std::size_t tree_passes = 0;
    std::size_t tree_nodes_pre = 0;   // summed over tree passes
    std::size_t tree_nodes_post = 0;  // after pruning
    std::uint64_t muladds = 0;

    double cr_ratio() const {
        return target_calls == 0 ? 0.0
                                 : static_cast<double>(generated_tokens) /
                                       static_cast<double>(target_calls);
    }
    double mean_tree_size_post_prune() const {
        return tree_passes == 0 ? 0.0
                                : static_cast<double>(tree_nodes_post) /
                                      static_cast<double>(tree_passes);
    }
};

struct StepResult {
    std::vector<int> accepted_tokens;  // delta draft tokens, root excluded
    int correction_token = -1;
    int advancement = 0;  // beta = delta + 1
    TreeDraft next_tree;
    std::size_t target_calls = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Picks the target token for a given sequence position from a logit row.
template <typename T>
class TokenPicker {
public:
    explicit TokenPicker(const SamplingParams& p = {}) : p_(p) {}

    int pick(std::span<const T> logits, std::size_t position) const {
        if (!p_.sample || p_.temperature <= 0.0) return argmax(logits);
        const int k = p_.top_k > 0 ? p_.top_k : static_cast<int>(logits.size());
        auto cands = topk(logits, k);
        double maxv = static_cast<double>(cands.front().second) / p_.temperature;
        std::vector<double> w(cands.size());
        double total = 0.0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            w[i] = std::exp(static_cast<double>(cands[i].second) / p_.temperature - maxv);
            total += w[i];
        }
        const std::uint64_t bits =
            detail::splitmix64(p_.seed ^ detail::splitmix64(static_cast<std::uint64_t>(position) + 1));
        const double u = static_cast<double>(bits >> 11) * 0x1.0p-53 * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            acc += w[i];
            if (u < acc) return cands[i].first;
        }
        return cands.back().first;
    }

private:
    SamplingParams p_;
};

struct Verification {
    std::vector<int> accepted;  // node indices into the verified tree, root excluded
    int correction_token = -1;
    int source_node = 0;  // last accepted node (root if nothing accepted)
};

/// Hard-matching greedy walk: at each node, the target picks its next token;
/// a child carrying exactly that token is accepted and the walk continues.
/// The correction token is the target's pick at the last accepted node.
/// `base_position` is the committed length the tree was built against (used
/// only by sampling pickers).
template <typename T>
Verification verify_longest_path(const TreeDraft& tree, const Tensor<T>& main_logits,
                                 const TokenPicker<T>& picker = TokenPicker<T>{},
                                 std::size_t base_position = 0) {
    if (main_logits.rows() != tree.size()) {
        throw ShapeError("verify_longest_path: need one logit row per node");
    }
    Verification out;
    int cur = 0;
    for (;;) {
        const std::size_t pos =
            base_position + static_cast<std::size_t>(tree.nodes[static_cast<std::size_t>(cur)].depth);
        const int target = picker.pick(main_logits.row_span(static_cast<std::size_t>(cur)), pos + 1);
        int next = -1;
        for (std::size_t c = static_cast<std::size_t>(cur) + 1; c < tree.size(); ++c) {
            if (tree.nodes[c].parent == cur && tree.nodes[c].token == target) {
                next = static_cast<int>(c);
                break;
            }
        }
        if (next < 0) {
            out.correction_token = target;
            out.source_node = cur;
            return out;
        }
        out.accepted.push_back(next);
        cur = next;
    }
}

/// One decoding session: owns the KV cache, the committed token sequence and
/// the pending draft. The pending draft's root is always the most recently
/// committed token (its K/V rows land in the cache during the next pass).
template <typename T>
class DecodeSession {
public:
    DecodeSession(const Model<T>& model, GenerateParams params)
        : model_(model), cache_(model.make_cache()), params_(std::move(params)),
          picker_(params_.sampling) {
        if (params_.max_new_tokens < 1) throw ParamError("max_new_tokens must be >= 1");
        if (params_.k < 1) throw ParamError("k must be >= 1");
        if (params_.tau < 0.0 || params_.tau > 1.0 + 1e-12) {
            throw ParamError("tau must lie in [0, 1]");
        }
        gamma_ = params_.gamma < 0 ? model.config().num_streams : params_.gamma;
        if (gamma_ > model.config().num_streams) {
            throw ParamError("gamma exceeds the model's stream count");
        }
    }

    /// Forward the prompt once; greedily commit the first generated token and
    /// seed the first draft from the last position's stream logits.
    TreeDraft process_prompt(const std::vector<int>& prompt) {
        if (prompt.empty()) throw ParamError("process_prompt: empty prompt");
        if (prompt.size() >= static_cast<std::size_t>(model_.config().max_seq_len)) {
            // the first generated token needs a position of its own
            throw CapacityError("process_prompt: prompt leaves no room to generate");
        }
        TreeDraft chain = make_chain(prompt, 0);
        auto fo = model_.forward(cache_, chain,
                                 ForwardOptions{gamma_ > 0 ? StreamRequest::kLast
                                                           : StreamRequest::kNone,
                                                0.0, gamma_});
        std::vector<int> ids(prompt.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
        cache_.commit(ids);
        metrics_.target_calls += 1;
        metrics_.muladds += fo.muladds.total();

        const std::size_t last = prompt.size() - 1;
        const int first = picker_.pick(fo.main_logits.row_span(last), prompt.size());
        tokens_ = prompt;
        tokens_.push_back(first);
        prompt_len_ = prompt.size();
        metrics_.generated_tokens += 1;
        metrics_.beta_histogram[1] += 1;
        last_advancement_ = 1;
        pending_ = next_tree(first, fo, static_cast<int>(prompt.size()) - 1);
        return pending_;
    }

    /// Verify the pending draft and issue the next one in a single pass.
    StepResult decode_step() {
        if (tokens_.size() <= prompt_len_) throw LogicError("decode_step before process_prompt");
        clip_pending_to_capacity();
        const std::size_t committed = cache_.committed_length();
        auto fo = model_.forward(cache_, pending_,
                                 ForwardOptions{gamma_ > 0 ? StreamRequest::kAll
                                                           : StreamRequest::kNone,
                                                params_.tau, gamma_});
        metrics_.tree_passes += 1;
        metrics_.tree_nodes_pre += pending_.size();
        metrics_.tree_nodes_post += fo.tree.size();
        metrics_.pruned_nodes += fo.pruned_nodes;
        metrics_.muladds += fo.muladds.total();

        Verification v = verify_longest_path(fo.tree, fo.main_logits, picker_, committed);

        std::vector<int> commit_ids;
        commit_ids.push_back(fo.kept[0]);  // root, committed logically last pass
        StepResult step;
        for (int node : v.accepted) {
            commit_ids.push_back(fo.kept[static_cast<std::size_t>(node)]);
            step.accepted_tokens.push_back(fo.tree.nodes[static_cast<std::size_t>(node)].token);
        }
        cache_.commit(commit_ids);

        for (int tok : step.accepted_tokens) tokens_.push_back(tok);
        tokens_.push_back(v.correction_token);
        step.correction_token = v.correction_token;
        step.advancement = static_cast<int>(step.accepted_tokens.size()) + 1;
        metrics_.generated_tokens += static_cast<std::size_t>(step.advancement);
        metrics_.beta_histogram[step.advancement] += 1;
        metrics_.target_calls += 1;
        last_advancement_ = static_cast<std::size_t>(step.advancement);

        pending_ = next_tree(v.correction_token, fo, v.source_node);
        step.next_tree = pending_;
        step.target_calls = metrics_.target_calls;
        return step;
    }

    const std::vector<int>& tokens() const { return tokens_; }
    std::size_t prompt_length() const { return prompt_len_; }
    const TreeDraft& pending_tree() const { return pending_; }
    DecodeMetrics& metrics() { return metrics_; }
    const KVCache<T>& cache() const { return cache_; }

    /// Drop trailing emitted tokens (eos / max-new truncation) and fix up the
    /// last pass's recorded advancement so generated == sum of the histogram.
    /// Only valid immediately after process_prompt or decode_step.
    void truncate_emitted(std::size_t keep) {
        const std::size_t emitted = tokens_.size() - prompt_len_;
        if (keep >= emitted) return;
        const std::size_t drop = emitted - keep;
        if (drop >= last_advancement_) {
            throw LogicError("truncate_emitted: can only trim within the last pass");
        }
        tokens_.resize(prompt_len_ + keep);
        const int old_beta = static_cast<int>(last_advancement_);
        metrics_.beta_histogram[old_beta] -= 1;
        if (metrics_.beta_histogram[old_beta] == 0) metrics_.beta_histogram.erase(old_beta);
        const int new_beta = old_beta - static_cast<int>(drop);
        metrics_.beta_histogram[new_beta] += 1;
        metrics_.generated_tokens -= drop;
        last_advancement_ = static_cast<std::size_t>(new_beta);
    }

private:
    TreeDraft next_tree(int correction, const ForwardOutput<T>& fo, int source_node) {
        if (gamma_ == 0) {
            return build_tree(correction, Tensor<T>{}, params_.k, cache_.committed_length());
        }
        // Locate the stream rows of source_node among the selected nodes.
        std::size_t sel_pos = 0;
        bool found = false;
        for (std::size_t i = 0; i < fo.stream_nodes.size(); ++i) {
            if (fo.stream_nodes[i] == source_node) {
                sel_pos = i;
                found = true;
                break;
            }
        }
        if (!found) throw LogicError("next_tree: no stream logits for the accepted node");
        const auto v = static_cast<std::size_t>(model_.config().vocab_size);
        Tensor<T> logits({static_cast<std::size_t>(gamma_), v});
        for (int j = 1; j <= gamma_; ++j) {
            auto row = fo.stream_row(sel_pos, j);
            std::copy(row.begin(), row.end(), logits.row(static_cast<std::size_t>(j - 1)));
        }
        return build_tree(correction, logits, params_.k, cache_.committed_length());
    }

    /// Drop draft nodes that no longer fit the cache/position budget; the
    /// preorder prefix keeps ancestor closure. The root must always fit.
    void clip_pending_to_capacity() {
        const std::size_t committed = cache_.committed_length();
        const auto max_seq = static_cast<std::size_t>(model_.config().max_seq_len);
        if (committed >= max_seq) {
            throw CapacityError("decode_step: committed sequence already at max length");
        }
        const std::size_t row_budget = max_seq - committed;
        std::vector<TreeNode> kept_nodes;
        std::vector<int> remap(pending_.size(), -1);
        for (std::size_t i = 0; i < pending_.size(); ++i) {
            const auto& node = pending_.nodes[i];
            if (committed + static_cast<std::size_t>(node.depth) >= max_seq) continue;
            if (node.parent >= 0 && remap[static_cast<std::size_t>(node.parent)] < 0) continue;
            if (kept_nodes.size() == row_budget) break;
            TreeNode copy = node;
            if (copy.parent >= 0) copy.parent = remap[static_cast<std::size_t>(copy.parent)];
            remap[i] = static_cast<int>(kept_nodes.size());
            kept_nodes.push_back(copy);
        }
        if (kept_nodes.size() == pending_.size()) return;
        pending_.nodes = std::move(kept_nodes);
        pending_.mask = build_mask(pending_.nodes, committed);
    }

    const Model<T>& model_;
    KVCache<T> cache_;
    GenerateParams params_;
    TokenPicker<T> picker_;
    int gamma_ = 0;
    std::vector<int> tokens_;
    std::size_t prompt_len_ = 0;
    TreeDraft pending_;
    DecodeMetrics metrics_;
    std::size_t last_advancement_ = 0;
};

struct GenerateResult {
    std::vector<int> tokens;  // emitted tokens only (prompt excluded)
    DecodeMetrics metrics;
};

/// Speculative generation: one verification pass per target call, advancing
/// beta = delta + 1 tokens each. Output is exactly what reference_generate
/// produces for the same parameters. tree_log, when given, receives the
/// pending draft issued by every pass (debug surface).
template <typename T>
GenerateResult generate(const Model<T>& model, const std::vector<int>& prompt,
                        const GenerateParams& params,
                        std::vector<TreeDraft>* tree_log = nullptr) {
    DecodeSession<T> session(model, params);
    session.process_prompt(prompt);
    if (tree_log != nullptr) tree_log->push_back(session.pending_tree());
    const auto max_new = static_cast<std::size_t>(params.max_new_tokens);

    // Keep-count after scanning the newly emitted segment for eos, clamped to
    // max_new; second member says whether generation is finished.
    auto stop_check = [&](std::size_t scan_from) -> std::pair<std::size_t, bool> {
        const auto& toks = session.tokens();
        std::size_t keep = toks.size() - session.prompt_length();
        bool stop = false;
        if (params.eos_token >= 0) {
            for (std::size_t i = session.prompt_length() + scan_from; i < toks.size(); ++i) {
                if (toks[i] == params.eos_token) {
                    keep = i - session.prompt_length() + 1;
                    stop = true;
                    break;
                }
            }
        }
        if (keep >= max_new) {
            keep = max_new;
            stop = true;
        }
        return {keep, stop};
    };

    auto [keep, stop] = stop_check(0);
    session.truncate_emitted(keep);
    while (!stop) {
        const std::size_t before = session.tokens().size() - session.prompt_length();
        session.decode_step();
        if (tree_log != nullptr) tree_log->push_back(session.pending_tree());
        std::tie(keep, stop) = stop_check(before);
        session.truncate_emitted(keep);
    }

    GenerateResult out;
    out.tokens.assign(session.tokens().begin() +
                          static_cast<std::ptrdiff_t>(session.prompt_length()),
                      session.tokens().end());
    out.metrics = session.metrics();
    return out;
}

/// Plain autoregressive decoding, one token per forward pass; streams are
/// never run. This is the equivalence oracle for generate().
template <typename T>
GenerateResult reference_generate(const Model<T>& model, const std::vector<int>& prompt,
                                  int max_new_tokens, int eos_token = -1,
                                  const SamplingParams& sampling = {}) {
    if (prompt.empty()) throw ParamError("reference_generate: empty prompt");
    if (max_new_tokens < 1) throw ParamError("max_new_tokens must be >= 1");
    TokenPicker<T> picker(sampling);
    KVCache<T> cache = model.make_cache();
    GenerateResult out;

    TreeDraft chain = make_chain(prompt, 0);
    auto fo = model.forward(cache, chain, ForwardOptions{StreamRequest::kNone, 0.0, 0});
    std::vector<int> ids(prompt.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    cache.commit(ids);
    out.metrics.target_calls += 1;
    out.metrics.muladds += fo.muladds.total();
    int tok = picker.pick(fo.main_logits.row_span(prompt.size() - 1), prompt.size());
    out.tokens.push_back(tok);
    out.metrics.generated_tokens += 1;
    out.metrics.beta_histogram[1] += 1;

    while (static_cast<int>(out.tokens.size()) < max_new_tokens &&
           !(eos_token >= 0 && tok == eos_token)) {
        const std::size_t committed = cache.committed_length();
        if (committed >= static_cast<std::size_t>(model.config().max_seq_len)) {
            throw CapacityError("reference_generate: committed sequence at max length");
        }
        TreeDraft one = make_chain({tok}, committed);
        fo = model.forward(cache, one, ForwardOptions{StreamRequest::kNone, 0.0, 0});
        cache.commit({0});
        out.metrics.target_calls += 1;
        out.metrics.muladds += fo.muladds.total();
        tok = picker.pick(fo.main_logits.row_span(0), committed + 1);
        out.tokens.push_back(tok);
        out.metrics.generated_tokens += 1;
        out.metrics.beta_histogram[1] += 1;
    }
    return out;
}

}  // namespace specstream
