#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "specstream/config.hpp"
#include "specstream/model.hpp"
#include "specstream/tensor.hpp"
#include "specstream/weights.hpp"

namespace testutil {

using namespace specstream;

inline ModelConfig micro_config(int vocab = 11, int hidden = 8, int heads = 2, int layers = 2,
                                int msa_layers = 1, int streams = 2, int init_rank = 0,
                                int adapter_rank = 2,
                                StreamMode mode = StreamMode::kEmbedding,
                                double rotation_step = 0.0, int max_seq = 64) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.hidden_size = hidden;
    cfg.num_heads = heads;
    cfg.num_layers = layers;
    cfg.num_msa_layers = msa_layers;
    cfg.num_streams = streams;
    cfg.stream_init_rank = init_rank;
    cfg.prune_adapter_rank = adapter_rank;
    cfg.stream_mode = mode;
    cfg.rotation_step = rotation_step;
    cfg.max_seq_len = max_seq;
    return cfg;
}

template <typename T>
Model<T> random_model(const ModelConfig& cfg, std::uint64_t seed) {
    return Model<T>(cfg, init_weights<T>(cfg, seed));
}

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
    return t;
}

inline std::vector<int> random_tokens(int count, int vocab, std::mt19937_64& rng) {
    std::vector<int> out(static_cast<std::size_t>(count));
    std::uniform_int_distribution<int> dist(0, vocab - 1);
    for (auto& t : out) t = dist(rng);
    return out;
}

/// A model whose attention and FFN blocks are no-ops (wo = w2 = 0) and whose
/// embeddings/head implement "next token = current + 1 (mod v)" exactly:
/// tok_embedding is one-hot, positions are zero, and lm_head column (t+1)
/// reads coordinate t of the ln_f-normalized one-hot. Hand-checkable.
template <typename T>
Model<T> successor_model(int vocab, int streams = 2, int max_seq = 32) {
    ModelConfig cfg = micro_config(vocab, vocab, 1, 2, 1, streams, 0, 2,
                                   StreamMode::kEmbedding, 0.0, max_seq);
    ModelWeights<T> w = make_zero_weights<T>(cfg);
    const auto v = static_cast<std::size_t>(vocab);
    for (std::size_t t = 0; t < v; ++t) w.tok_embedding(t, t) = T(1);
    for (auto& lw : w.layers) {
        for (std::size_t i = 0; i < lw.ln1_gain.size(); ++i) {
            lw.ln1_gain[i] = T(1);
            lw.ln2_gain[i] = T(1);
        }
    }
    for (std::size_t i = 0; i < w.ln_f_gain.size(); ++i) w.ln_f_gain[i] = T(1);
    for (std::size_t t = 0; t < v; ++t) w.lm_head(t, (t + 1) % v) = T(1);
    return Model<T>(cfg, std::move(w));
}

}  // namespace testutil
