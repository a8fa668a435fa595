#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "specstream/autograd.hpp"
#include "specstream/decoder.hpp"
#include "specstream/errors.hpp"
#include "specstream/model.hpp"
#include "specstream/tensor.hpp"
#include "specstream/weights.hpp"

namespace specstream {

/// Joint n-gram objective weights: alpha0 for the next token, alpha[j-1] for
/// stream j (the token j+1 steps ahead of the current position).
struct LossWeights {
    double alpha0 = 1.0;
    std::vector<double> alpha;  // one per stream

    static LossWeights uniform(int gamma, double a0 = 1.0, double aj = 0.1) {
        LossWeights w;
        w.alpha0 = a0;
        w.alpha.assign(static_cast<std::size_t>(gamma), aj);
        return w;
    }

    void validate(int gamma) const {
        if (static_cast<int>(alpha.size()) != gamma) {
            throw ParamError("loss weights: need one alpha per stream (got " +
                             std::to_string(alpha.size()) + ", gamma " + std::to_string(gamma) + ")");
        }
        if (alpha0 < 0.0) throw ParamError("loss weights: alpha0 must be >= 0");
        for (double a : alpha) {
            if (a < 0.0) throw ParamError("loss weights: alphas must be >= 0");
        }
    }
};

struct TrainExample {
    std::vector<int> context;
    std::vector<int> targets;
};

// ---------------------------------------------------------------------------
// Synthetic languages with deterministic continuations, so a converged model
// can accept every speculation.
// ---------------------------------------------------------------------------

enum class LanguageKind { kCounting, kRepeatedMotif, kKeyedLookup };

inline LanguageKind language_kind_from_string(const std::string& s) {
    if (s == "counting") return LanguageKind::kCounting;
    if (s == "motif") return LanguageKind::kRepeatedMotif;
    if (s == "lookup") return LanguageKind::kKeyedLookup;
    throw ParamError("unknown language \"" + s + "\" (expected counting|motif|lookup)");
}

class SyntheticLanguage {
public:
    SyntheticLanguage(LanguageKind kind, int vocab, std::uint64_t seed)
        : kind_(kind), vocab_(vocab), seed_(seed) {
        if (vocab < 4) throw ParamError("language: vocab must be >= 4");
        if (kind_ == LanguageKind::kRepeatedMotif) {
            successor_ = random_permutation(vocab_, seed_);
        } else if (kind_ == LanguageKind::kKeyedLookup) {
            for (int key = 0; key < kNumKeys; ++key) {
                auto perm = random_permutation(vocab_ - kNumKeys, seed_ ^ (0x51ull * (key + 1)));
                for (auto& tok : perm) tok += kNumKeys;
                keyed_successor_.push_back(std::move(perm));
            }
        }
    }

    LanguageKind kind() const { return kind_; }
    int vocab() const { return vocab_; }

    /// The unique continuation of a context under this language's rule.
    int next_token(std::span<const int> context) const {
        if (context.empty()) throw ParamError("language: empty context");
        const int last = context.back();
        switch (kind_) {
            case LanguageKind::kCounting:
                return (last + 1) % vocab_;
            case LanguageKind::kRepeatedMotif:
                return successor_[static_cast<std::size_t>(last)];
            case LanguageKind::kKeyedLookup: {
                const int key = context.front() % kNumKeys;
                if (last < kNumKeys) return first_body_token(key);
                return keyed_successor_[static_cast<std::size_t>(key)]
                                       [static_cast<std::size_t>(last - kNumKeys)];
            }
        }
        throw LogicError("unreachable");
    }

    std::vector<int> make_sequence(std::uint64_t sample_seed, std::size_t len) const {
        if (len == 0) throw ParamError("language: zero-length sequence");
        std::vector<int> seq;
        seq.reserve(len);
        const std::uint64_t r = detail::splitmix64(seed_ ^ detail::splitmix64(sample_seed));
        if (kind_ == LanguageKind::kKeyedLookup) {
            seq.push_back(static_cast<int>(r % kNumKeys));
        } else {
            seq.push_back(static_cast<int>(r % static_cast<std::uint64_t>(vocab_)));
        }
        while (seq.size() < len) {
            seq.push_back(next_token(seq));
        }
        return seq;
    }

    TrainExample make_example(std::uint64_t sample_seed, int context_len, int target_len) const {
        if (context_len < 1 || target_len < 1) {
            throw ParamError("language: context and target lengths must be >= 1");
        }
        auto seq = make_sequence(sample_seed,
                                 static_cast<std::size_t>(context_len + target_len));
        TrainExample ex;
        ex.context.assign(seq.begin(), seq.begin() + context_len);
        ex.targets.assign(seq.begin() + context_len, seq.end());
        return ex;
    }

    std::vector<int> make_prompt(std::uint64_t sample_seed, int len) const {
        return make_sequence(sample_seed, static_cast<std::size_t>(len));
    }

private:
    static constexpr int kNumKeys = 4;

    int first_body_token(int key) const {
        return kNumKeys + (key * 7 + 1) % (vocab_ - kNumKeys);
    }

    static std::vector<int> random_permutation(int n, std::uint64_t seed) {
        std::vector<int> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        std::uint64_t state = seed;
        for (int i = n - 1; i > 0; --i) {
            state = detail::splitmix64(state);
            std::swap(perm[static_cast<std::size_t>(i)],
                      perm[state % static_cast<std::uint64_t>(i + 1)]);
        }
        return perm;
    }

    LanguageKind kind_;
    int vocab_;
    std::uint64_t seed_;
    std::vector<int> successor_;                   // motif
    std::vector<std::vector<int>> keyed_successor_;  // lookup, maps body tokens
};

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

template <typename T>
struct GradientMap {
    std::vector<std::pair<std::string, Tensor<T>>> grads;  // registry order

    Tensor<T>& at(const std::string& name) {
        for (auto& [n, g] : grads) {
            if (n == name) return g;
        }
        throw LogicError("no gradient for tensor \"" + name + "\"");
    }
};

struct LossBreakdown {
    double speculative_loss = 0.0;  // weighted, normalized by the weighted token count
    double main_nll_mean = 0.0;
    std::vector<double> stream_nll_mean;
    double early_exit_nll_mean = 0.0;
    double total_objective = 0.0;  // speculative_loss + ee_weight * early-exit mean
    std::size_t forward_passes = 0;
    // Raw sums and counts behind the means (decomposition checks).
    double main_nll_sum = 0.0;
    std::vector<double> stream_nll_sum;
    double early_exit_nll_sum = 0.0;
    std::size_t main_count = 0;
    std::vector<std::size_t> stream_count;
    std::size_t early_exit_count = 0;
};

namespace detail {

/// Training-time MSA mask over stream-major rows [mains | stream1 | ... |
/// streamG]: main row t is causal over mains; stream j's row t additionally
/// sees stream rows 1..j at the same position.
template <typename T>
Tensor<T> training_msa_mask(std::size_t s_len, int gamma) {
    const std::size_t g = static_cast<std::size_t>(gamma);
    const std::size_t rows = s_len * (1 + g);
    Tensor<T> mask = Tensor<T>::filled({rows, rows}, neg_inf<T>());
    for (std::size_t t = 0; t < s_len; ++t) {
        for (std::size_t c = 0; c <= t; ++c) mask(t, c) = T(0);
    }
    for (std::size_t j = 1; j <= g; ++j) {
        for (std::size_t t = 0; t < s_len; ++t) {
            const std::size_t r = j * s_len + t;
            for (std::size_t c = 0; c <= t; ++c) mask(r, c) = T(0);
            for (std::size_t jp = 1; jp <= j; ++jp) mask(r, jp * s_len + t) = T(0);
        }
    }
    return mask;
}

template <typename T>
Tensor<T> causal_mask(std::size_t s_len) {
    Tensor<T> mask = Tensor<T>::filled({s_len, s_len}, neg_inf<T>());
    for (std::size_t t = 0; t < s_len; ++t) {
        for (std::size_t c = 0; c <= t; ++c) mask(t, c) = T(0);
    }
    return mask;
}

/// Tape leaves for every trainable tensor, in registry order.
template <typename T>
struct ParamLeaves {
    std::vector<std::pair<std::string, typename ad::Tape<T>::Id>> ids;

    typename ad::Tape<T>::Id at(const std::string& name) const {
        for (const auto& [n, id] : ids) {
            if (n == name) return id;
        }
        throw LogicError("no parameter leaf \"" + name + "\"");
    }
};

template <typename T>
ParamLeaves<T> make_param_leaves(const ModelConfig& cfg, const ModelWeights<T>& w,
                                 ad::Tape<T>& tape) {
    ParamLeaves<T> leaves;
    for_each_tensor(cfg, w, [&](const std::string& name, const Tensor<T>& t) {
        leaves.ids.emplace_back(name, tape.leaf(t, true));
    });
    return leaves;
}

/// Per-example scalar loss terms (unweighted sums) plus their token counts.
template <typename T>
struct ExampleTerms {
    typename ad::Tape<T>::Id main_nll;
    std::vector<typename ad::Tape<T>::Id> stream_nll;
    typename ad::Tape<T>::Id early_exit_nll;
    std::size_t main_count = 0;
    std::vector<std::size_t> stream_count;
};

/// Teacher-forced forward over context + targets with streams at every
/// position; mirrors the inference layer stack op for op.
template <typename T>
ExampleTerms<T> build_example_graph(const ModelConfig& cfg, const ParamLeaves<T>& p,
                                    ad::Tape<T>& tape, const TrainExample& ex) {
    using Id = typename ad::Tape<T>::Id;
    const int gamma = cfg.num_streams;
    std::vector<int> tokens = ex.context;
    tokens.insert(tokens.end(), ex.targets.begin(), ex.targets.end());
    const std::size_t s_len = tokens.size();
    if (s_len > static_cast<std::size_t>(cfg.max_seq_len)) {
        throw CapacityError("training example exceeds max sequence length");
    }
    const std::size_t m = ex.context.size();
    const std::size_t t_len = ex.targets.size();
    const int heads = cfg.num_heads;
    const T eps = Model<T>::kLnEps;

    std::vector<int> positions(s_len);
    std::iota(positions.begin(), positions.end(), 0);
    Id x = tape.add(tape.gather_rows(p.at("tok_embedding"), tokens),
                    tape.gather_rows(p.at("pos_embedding"), positions));

    auto block = [&](int layer, Id h_in, std::shared_ptr<const Tensor<T>> mask,
                     const std::vector<double>* angles) {
        const std::string pre = "layers." + std::to_string(layer) + ".";
        Id ln1 = tape.layer_norm(h_in, p.at(pre + "ln1.gain"), p.at(pre + "ln1.bias"), eps);
        Id q = tape.matmul(ln1, p.at(pre + "attn.wq"));
        Id k = tape.matmul(ln1, p.at(pre + "attn.wk"));
        Id v = tape.matmul(ln1, p.at(pre + "attn.wv"));
        if (angles != nullptr) v = tape.rotate_rows(v, *angles);
        Id ctx = tape.attend(q, k, v, mask, heads);
        Id h1 = tape.add(h_in, tape.matmul(ctx, p.at(pre + "attn.wo")));
        Id ln2 = tape.layer_norm(h1, p.at(pre + "ln2.gain"), p.at(pre + "ln2.bias"), eps);
        return tape.add(h1, tape.matmul(tape.gelu(tape.matmul(ln2, p.at(pre + "ffn.w1"))),
                                        p.at(pre + "ffn.w2")));
    };

    auto causal = std::make_shared<const Tensor<T>>(causal_mask<T>(s_len));
    for (int l = 0; l < cfg.split_layer(); ++l) x = block(l, x, causal, nullptr);
    const Id x_split = x;

    // Streams ride the top layers next to the main rows (stream-major).
    Id rows = x;
    std::vector<double> angles;
    if (gamma > 0) {
        std::vector<Id> parts{x};
        if (cfg.stream_mode == StreamMode::kEmbedding) {
            Id base = x_split;
            if (cfg.stream_init_rank > 0) {
                base = tape.matmul(tape.matmul(x_split, p.at("stream_init.a")),
                                   p.at("stream_init.b"));
            }
            for (int j = 1; j <= gamma; ++j) {
                parts.push_back(tape.add_row_broadcast(
                    base, p.at("stream_embedding." + std::to_string(j))));
            }
        } else {
            for (int j = 1; j <= gamma; ++j) parts.push_back(x_split);
        }
        rows = tape.concat_rows(parts);
        angles.assign(s_len * static_cast<std::size_t>(1 + gamma), 0.0);
        if (cfg.stream_mode == StreamMode::kRotation && cfg.rotation_step != 0.0) {
            for (int j = 1; j <= gamma; ++j) {
                for (std::size_t t = 0; t < s_len; ++t) {
                    angles[static_cast<std::size_t>(j) * s_len + t] = cfg.rotation_step * j;
                }
            }
        }
    }
    auto msa_mask = std::make_shared<const Tensor<T>>(training_msa_mask<T>(s_len, gamma));
    const bool rotate = cfg.stream_mode == StreamMode::kRotation && cfg.rotation_step != 0.0;
    for (int l = cfg.split_layer(); l < cfg.num_layers; ++l) {
        rows = block(l, rows, gamma > 0 ? msa_mask : causal, rotate ? &angles : nullptr);
    }

    auto head_logits = [&](Id hidden) {
        return tape.matmul(tape.layer_norm(hidden, p.at("ln_f.gain"), p.at("ln_f.bias"), eps),
                           p.at("lm_head"));
    };

    // Row t predicts token t+1 (main) or t+1+j (stream j); losses cover
    // target positions only.
    auto targets_for = [&](int offset) {
        std::vector<int> tg(s_len, -1);
        std::vector<double> wt(s_len, 0.0);
        for (std::size_t t = 0; t < s_len; ++t) {
            const std::size_t pred = t + 1 + static_cast<std::size_t>(offset);
            if (t + 1 >= m && pred < s_len) {
                tg[t] = tokens[pred];
                wt[t] = 1.0;
            }
        }
        return std::make_pair(tg, wt);
    };

    ExampleTerms<T> terms;
    Id main_rows = gamma > 0 ? tape.slice_rows(rows, 0, s_len) : rows;
    auto [main_tg, main_wt] = targets_for(0);
    terms.main_nll = tape.nll(head_logits(main_rows), main_tg, main_wt);
    terms.main_count = t_len;
    for (int j = 1; j <= gamma; ++j) {
        Id s_rows = tape.slice_rows(rows, static_cast<std::size_t>(j) * s_len, s_len);
        auto [tg, wt] = targets_for(j);
        terms.stream_nll.push_back(tape.nll(head_logits(s_rows), tg, wt));
        terms.stream_count.push_back(t_len > static_cast<std::size_t>(j)
                                         ? t_len - static_cast<std::size_t>(j)
                                         : 0);
    }
    // Early-exit adapter: next-token loss through o_theta and the shared head.
    Id adapted = tape.matmul(tape.matmul(x_split, p.at("prune_adapter.a")),
                             p.at("prune_adapter.b"));
    terms.early_exit_nll = tape.nll(tape.matmul(adapted, p.at("lm_head")), main_tg, main_wt);
    return terms;
}

}  // namespace detail

/// Eq-5-style joint loss plus the early-exit adapter loss over a batch.
/// When accumulate_gradients is non-null, also backpropagates and adds the
/// exact gradient of the reported total_objective into the map.
template <typename T>
LossBreakdown speculative_loss_and_gradients(const Model<T>& model,
                                             const std::vector<TrainExample>& batch,
                                             const LossWeights& weights, double ee_weight,
                                             GradientMap<T>* accumulate_gradients) {
    const ModelConfig& cfg = model.config();
    const int gamma = cfg.num_streams;
    weights.validate(gamma);
    if (ee_weight < 0.0) throw ParamError("early-exit weight must be >= 0");
    if (batch.empty()) throw ParamError("empty batch");

    LossBreakdown out;
    out.stream_nll_sum.assign(static_cast<std::size_t>(gamma), 0.0);
    out.stream_count.assign(static_cast<std::size_t>(gamma), 0);

    // Weighted token count for Eq-5 normalization, known before any forward.
    double w_ss = 0.0;
    std::size_t ee_count = 0;
    for (const auto& ex : batch) {
        const std::size_t t_len = ex.targets.size();
        if (ex.context.empty() || t_len == 0) {
            throw ParamError("training example needs nonempty context and targets");
        }
        w_ss += weights.alpha0 * static_cast<double>(t_len);
        for (int j = 1; j <= gamma; ++j) {
            w_ss += weights.alpha[static_cast<std::size_t>(j - 1)] *
                    static_cast<double>(t_len > static_cast<std::size_t>(j)
                                            ? t_len - static_cast<std::size_t>(j)
                                            : 0);
        }
        ee_count += t_len;
    }

    for (const auto& ex : batch) {
        ad::Tape<T> tape;
        auto leaves = detail::make_param_leaves(cfg, model.weights(), tape);
        auto terms = detail::build_example_graph(cfg, leaves, tape, ex);
        out.forward_passes += 1;

        out.main_nll_sum += static_cast<double>(tape.value(terms.main_nll)[0]);
        out.main_count += terms.main_count;
        for (int j = 0; j < gamma; ++j) {
            out.stream_nll_sum[static_cast<std::size_t>(j)] +=
                static_cast<double>(tape.value(terms.stream_nll[static_cast<std::size_t>(j)])[0]);
            out.stream_count[static_cast<std::size_t>(j)] +=
                terms.stream_count[static_cast<std::size_t>(j)];
        }
        out.early_exit_nll_sum += static_cast<double>(tape.value(terms.early_exit_nll)[0]);

        if (accumulate_gradients != nullptr) {
            std::vector<std::pair<typename ad::Tape<T>::Id, double>> root_terms;
            if (w_ss > 0.0) {
                if (weights.alpha0 > 0.0) {
                    root_terms.emplace_back(terms.main_nll, weights.alpha0 / w_ss);
                }
                for (int j = 0; j < gamma; ++j) {
                    const double a = weights.alpha[static_cast<std::size_t>(j)];
                    if (a > 0.0) {
                        root_terms.emplace_back(terms.stream_nll[static_cast<std::size_t>(j)],
                                                a / w_ss);
                    }
                }
            }
            if (ee_weight > 0.0) {
                root_terms.emplace_back(terms.early_exit_nll,
                                        ee_weight / static_cast<double>(ee_count));
            }
            if (!root_terms.empty()) {
                tape.backward(tape.add_scaled(root_terms));
                for (const auto& [name, id] : leaves.ids) {
                    Tensor<T>& dst = accumulate_gradients->at(name);
                    const Tensor<T>& src = tape.grad(id);
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
            }
        }
    }

    out.early_exit_count = ee_count;
    double weighted = weights.alpha0 * out.main_nll_sum;
    for (int j = 0; j < gamma; ++j) {
        weighted += weights.alpha[static_cast<std::size_t>(j)] *
                    out.stream_nll_sum[static_cast<std::size_t>(j)];
    }
    out.speculative_loss = w_ss > 0.0 ? weighted / w_ss : 0.0;
    out.main_nll_mean = out.main_count > 0
                            ? out.main_nll_sum / static_cast<double>(out.main_count)
                            : 0.0;
    out.stream_nll_mean.assign(static_cast<std::size_t>(gamma), 0.0);
    for (int j = 0; j < gamma; ++j) {
        if (out.stream_count[static_cast<std::size_t>(j)] > 0) {
            out.stream_nll_mean[static_cast<std::size_t>(j)] =
                out.stream_nll_sum[static_cast<std::size_t>(j)] /
                static_cast<double>(out.stream_count[static_cast<std::size_t>(j)]);
        }
    }
    out.early_exit_nll_mean =
        ee_count > 0 ? out.early_exit_nll_sum / static_cast<double>(ee_count) : 0.0;
    out.total_objective = out.speculative_loss + ee_weight * out.early_exit_nll_mean;
    return out;
}

template <typename T>
LossBreakdown speculative_loss(const Model<T>& model, const std::vector<TrainExample>& batch,
                               const LossWeights& weights, double ee_weight = 0.0) {
    return speculative_loss_and_gradients(model, batch, weights, ee_weight,
                                          static_cast<GradientMap<T>*>(nullptr));
}

template <typename T>
GradientMap<T> make_zero_gradients(const Model<T>& model) {
    GradientMap<T> g;
    for_each_tensor(model.config(), model.weights(),
                    [&](const std::string& name, const Tensor<T>& t) {
                        g.grads.emplace_back(name, Tensor<T>(t.shape()));
                    });
    return g;
}

template <typename T>
std::pair<LossBreakdown, GradientMap<T>> loss_gradients(const Model<T>& model,
                                                        const std::vector<TrainExample>& batch,
                                                        const LossWeights& weights,
                                                        double ee_weight = 1.0) {
    GradientMap<T> grads = make_zero_gradients(model);
    LossBreakdown loss =
        speculative_loss_and_gradients(model, batch, weights, ee_weight, &grads);
    return {loss, std::move(grads)};
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
    int steps = 1000;
    int batch_size = 8;
    double learning_rate = 0.5;
    bool linear_decay = true;
    Optimizer optimizer = Optimizer::kSgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    LossWeights weights;
    double ee_weight = 1.0;
    std::uint64_t seed = 0;
    int context_len = 4;
    int target_len = 24;
    int log_every = 50;
};

struct CurvePoint {
    int step = 0;
    double speculative_loss = 0.0;
    double main_nll = 0.0;
    std::vector<double> stream_nll;
    double early_exit_nll = 0.0;
};

struct TrainStats {
    std::vector<CurvePoint> curve;
    LossBreakdown final_loss;
};

/// Deterministic gradient-descent loop over freshly sampled batches. The
/// model is updated in place; loss NaN aborts with the failing step index.
template <typename T>
TrainStats train(Model<T>& model, const SyntheticLanguage& lang, const TrainConfig& tc) {
    if (tc.steps < 1 || tc.batch_size < 1) throw ParamError("train: steps and batch size >= 1");
    if (lang.vocab() != model.config().vocab_size) {
        throw ParamError("train: language vocab does not match the model");
    }
    tc.weights.validate(model.config().num_streams);

    GradientMap<T> adam_m, adam_v;
    if (tc.optimizer == Optimizer::kAdam) {
        adam_m = make_zero_gradients(model);
        adam_v = make_zero_gradients(model);
    }

    TrainStats stats;
    for (int step = 0; step < tc.steps; ++step) {
        std::vector<TrainExample> batch;
        batch.reserve(static_cast<std::size_t>(tc.batch_size));
        for (int b = 0; b < tc.batch_size; ++b) {
            const std::uint64_t sample_seed =
                detail::splitmix64(tc.seed ^ (static_cast<std::uint64_t>(step) * 0x10001ull +
                                              static_cast<std::uint64_t>(b)));
            batch.push_back(lang.make_example(sample_seed, tc.context_len, tc.target_len));
        }
        auto [loss, grads] = loss_gradients(model, batch, tc.weights, tc.ee_weight);
        if (!std::isfinite(loss.total_objective)) {
            throw TrainingError("training diverged (non-finite loss) at step " +
                                std::to_string(step));
        }
        const double lr = tc.linear_decay
                              ? tc.learning_rate *
                                    (static_cast<double>(tc.steps - step) /
                                     static_cast<double>(tc.steps))
                              : tc.learning_rate;
        std::size_t gi = 0;
        for_each_tensor(model.config(), model.mutable_weights(),
                        [&](const std::string& name, Tensor<T>& w) {
                            Tensor<T>& g = grads.grads[gi].second;
                            if (grads.grads[gi].first != name) {
                                throw LogicError("gradient/tensor order mismatch");
                            }
                            if (tc.optimizer == Optimizer::kSgd) {
                                for (std::size_t i = 0; i < w.size(); ++i) {
                                    w[i] -= static_cast<T>(lr * static_cast<double>(g[i]));
                                }
                            } else {
                                Tensor<T>& m = adam_m.grads[gi].second;
                                Tensor<T>& v = adam_v.grads[gi].second;
                                const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
                                const double bc1 = 1.0 - std::pow(b1, step + 1);
                                const double bc2 = 1.0 - std::pow(b2, step + 1);
                                for (std::size_t i = 0; i < w.size(); ++i) {
                                    const double gd = static_cast<double>(g[i]);
                                    const double md = b1 * static_cast<double>(m[i]) + (1 - b1) * gd;
                                    const double vd =
                                        b2 * static_cast<double>(v[i]) + (1 - b2) * gd * gd;
                                    m[i] = static_cast<T>(md);
                                    v[i] = static_cast<T>(vd);
                                    w[i] -= static_cast<T>(lr * (md / bc1) /
                                                           (std::sqrt(vd / bc2) + tc.adam_eps));
                                }
                            }
                            ++gi;
                        });
        if (step % tc.log_every == 0 || step == tc.steps - 1) {
            CurvePoint pt;
            pt.step = step;
            pt.speculative_loss = loss.speculative_loss;
            pt.main_nll = loss.main_nll_mean;
            pt.stream_nll = loss.stream_nll_mean;
            pt.early_exit_nll = loss.early_exit_nll_mean;
            stats.curve.push_back(std::move(pt));
        }
        if (step == tc.steps - 1) stats.final_loss = loss;
    }
    return stats;
}

}  // namespace specstream
