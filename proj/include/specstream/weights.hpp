#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "specstream/config.hpp"
#include "specstream/errors.hpp"
#include "specstream/tensor.hpp"

namespace specstream {

static_assert(std::endian::native == std::endian::little,
              "weight blobs are little-endian; big-endian hosts are unsupported");

template <typename T>
struct LayerWeights {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> wq, wk, wv, wo;      // [h, h]
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w1;                  // [h, 4h]
    Tensor<T> w2;                  // [4h, h]
};

template <typename T>
struct ModelWeights {
    Tensor<T> tok_embedding;                  // [v, h]
    Tensor<T> pos_embedding;                  // [max_seq_len, h]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> ln_f_gain, ln_f_bias;           // [h]
    Tensor<T> lm_head;                        // [h, v]
    std::vector<Tensor<T>> stream_embeddings; // gamma x [h], embedding mode only
    Tensor<T> stream_init_a, stream_init_b;   // [h, eta], [eta, h]; empty when identity
    Tensor<T> prune_adapter_a, prune_adapter_b;  // [h, theta], [theta, h]
};

/// Visit every tensor in a fixed order shared by init, I/O, training and
/// parameter counting. Stream-embedding tensors are 1-based to match stream
/// indices.
template <typename T, typename Fn>
void for_each_tensor(const ModelConfig& cfg, ModelWeights<T>& w, Fn&& fn) {
    fn("tok_embedding", w.tok_embedding);
    fn("pos_embedding", w.pos_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        auto& lw = w.layers[l];
        fn(p + "ln1.gain", lw.ln1_gain);
        fn(p + "ln1.bias", lw.ln1_bias);
        fn(p + "attn.wq", lw.wq);
        fn(p + "attn.wk", lw.wk);
        fn(p + "attn.wv", lw.wv);
        fn(p + "attn.wo", lw.wo);
        fn(p + "ln2.gain", lw.ln2_gain);
        fn(p + "ln2.bias", lw.ln2_bias);
        fn(p + "ffn.w1", lw.w1);
        fn(p + "ffn.w2", lw.w2);
    }
    fn("ln_f.gain", w.ln_f_gain);
    fn("ln_f.bias", w.ln_f_bias);
    fn("lm_head", w.lm_head);
    for (std::size_t j = 0; j < w.stream_embeddings.size(); ++j) {
        fn("stream_embedding." + std::to_string(j + 1), w.stream_embeddings[j]);
    }
    if (cfg.stream_init_rank > 0 && cfg.stream_mode == StreamMode::kEmbedding) {
        fn("stream_init.a", w.stream_init_a);
        fn("stream_init.b", w.stream_init_b);
    }
    fn("prune_adapter.a", w.prune_adapter_a);
    fn("prune_adapter.b", w.prune_adapter_b);
}

template <typename T, typename Fn>
void for_each_tensor(const ModelConfig& cfg, const ModelWeights<T>& w, Fn&& fn) {
    for_each_tensor(cfg, const_cast<ModelWeights<T>&>(w),
                    [&](const std::string& name, Tensor<T>& t) {
                        fn(name, static_cast<const Tensor<T>&>(t));
                    });
}

/// Allocate all tensors at their config-implied shapes, zero-filled.
template <typename T>
ModelWeights<T> make_zero_weights(const ModelConfig& cfg) {
    const auto h = static_cast<std::size_t>(cfg.hidden_size);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto f = static_cast<std::size_t>(cfg.ffn_size());
    ModelWeights<T> w;
    w.tok_embedding = Tensor<T>({v, h});
    w.pos_embedding = Tensor<T>({static_cast<std::size_t>(cfg.max_seq_len), h});
    w.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& lw : w.layers) {
        lw.ln1_gain = Tensor<T>({h});
        lw.ln1_bias = Tensor<T>({h});
        lw.wq = Tensor<T>({h, h});
        lw.wk = Tensor<T>({h, h});
        lw.wv = Tensor<T>({h, h});
        lw.wo = Tensor<T>({h, h});
        lw.ln2_gain = Tensor<T>({h});
        lw.ln2_bias = Tensor<T>({h});
        lw.w1 = Tensor<T>({h, f});
        lw.w2 = Tensor<T>({f, h});
    }
    w.ln_f_gain = Tensor<T>({h});
    w.ln_f_bias = Tensor<T>({h});
    w.lm_head = Tensor<T>({h, v});
    if (cfg.stream_mode == StreamMode::kEmbedding) {
        w.stream_embeddings.resize(static_cast<std::size_t>(cfg.num_streams));
        for (auto& e : w.stream_embeddings) e = Tensor<T>({h});
        if (cfg.stream_init_rank > 0) {
            const auto eta = static_cast<std::size_t>(cfg.stream_init_rank);
            w.stream_init_a = Tensor<T>({h, eta});
            w.stream_init_b = Tensor<T>({eta, h});
        }
    }
    const auto theta = static_cast<std::size_t>(cfg.prune_adapter_rank);
    w.prune_adapter_a = Tensor<T>({h, theta});
    w.prune_adapter_b = Tensor<T>({theta, h});
    return w;
}

namespace detail {

/// Deterministic standard-normal stream (explicit Box-Muller over mt19937_64
/// so the byte output does not depend on the standard library's
/// normal_distribution implementation).
class NormalSource {
public:
    explicit NormalSource(std::uint64_t seed) : rng_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    double uniform() {
        return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    }

    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace detail

/// Seeded random initialization: scaled normal (std 0.02) for projections and
/// embeddings, gains 1, biases 0, adapter-out factors 0 so the early-exit
/// distribution starts uniform.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    ModelWeights<T> w = make_zero_weights<T>(cfg);
    detail::NormalSource normal(seed);
    const double std_dev = 0.02;
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<T>& t) {
        const bool gain = name.ends_with(".gain");
        const bool bias = name.ends_with(".bias");
        const bool zero_init = name == "prune_adapter.b";
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (gain) {
                t[i] = T(1);
            } else if (bias || zero_init) {
                t[i] = T(0);
            } else {
                t[i] = static_cast<T>(normal.next() * std_dev);
            }
        }
    });
    return w;
}

inline constexpr int kManifestSchemaVersion = 1;

/// Serialize to the weight container: a manifest JSON naming every tensor
/// (name, shape, byte offset) and one raw little-endian f32 blob. f64 models
/// are demoted to f32 on write and promoted on read.
template <typename T>
void save_weights(const ModelConfig& cfg, const ModelWeights<T>& w,
                  const std::string& manifest_path, const std::string& blob_path) {
    nlohmann::ordered_json manifest;
    manifest["schema_version"] = kManifestSchemaVersion;
    manifest["blob"] = blob_path.substr(blob_path.find_last_of('/') + 1);
    manifest["tensors"] = nlohmann::ordered_json::array();
    std::vector<float> blob;
    for_each_tensor(cfg, w, [&](const std::string& name, const Tensor<T>& t) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = blob.size() * sizeof(float);
        manifest["tensors"].push_back(entry);
        for (std::size_t i = 0; i < t.size(); ++i) blob.push_back(static_cast<float>(t[i]));
    });
    manifest["blob_bytes"] = blob.size() * sizeof(float);

    std::ofstream mf(manifest_path);
    if (!mf) throw LoadError("cannot write manifest: " + manifest_path);
    mf << manifest.dump(2) << "\n";
    std::ofstream bf(blob_path, std::ios::binary);
    if (!bf) throw LoadError("cannot write blob: " + blob_path);
    bf.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

/// Load and validate a weight container against a config. Every tensor the
/// config requires must be present at the expected shape; unknown tensors are
/// rejected (e.g. stream embeddings in a value-rotation container).
template <typename T>
ModelWeights<T> load_weights(const ModelConfig& cfg, const nlohmann::json& manifest,
                             const std::vector<std::uint8_t>& blob) {
    int version = -1;
    try {
        version = manifest.at("schema_version").get<int>();
    } catch (const nlohmann::json::exception&) {
        throw LoadError("manifest: missing schema_version");
    }
    if (version != kManifestSchemaVersion) {
        throw LoadError("manifest: unsupported schema_version " + std::to_string(version));
    }
    if (manifest.contains("blob_bytes") &&
        manifest.at("blob_bytes").get<std::size_t>() != blob.size()) {
        throw LoadError("manifest: blob size mismatch (expected " +
                        std::to_string(manifest.at("blob_bytes").get<std::size_t>()) + " bytes, got " +
                        std::to_string(blob.size()) + ")");
    }

    struct Entry {
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
        bool used = false;
    };
    std::map<std::string, Entry> entries;
    try {
        for (const auto& e : manifest.at("tensors")) {
            Entry ent;
            ent.shape = e.at("shape").get<std::vector<std::size_t>>();
            ent.offset = e.at("offset").get<std::size_t>();
            entries[e.at("name").get<std::string>()] = ent;
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("manifest: ") + e.what());
    }

    ModelWeights<T> w = make_zero_weights<T>(cfg);
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<T>& t) {
        auto it = entries.find(name);
        if (it == entries.end()) throw LoadError("missing tensor \"" + name + "\"");
        Entry& ent = it->second;
        if (ent.shape != t.shape()) throw LoadError("shape mismatch for tensor \"" + name + "\"");
        const std::size_t bytes = t.size() * sizeof(float);
        if (ent.offset % sizeof(float) != 0 || ent.offset + bytes > blob.size()) {
            throw LoadError("tensor \"" + name + "\" extends past end of blob");
        }
        const auto* src = reinterpret_cast<const float*>(blob.data() + ent.offset);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(src[i]);
        ent.used = true;
    });
    for (const auto& [name, ent] : entries) {
        if (!ent.used) {
            throw LoadError("unexpected tensor \"" + name + "\" for this config (mode/tensor conflict)");
        }
    }
    return w;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw LoadError("cannot open file: " + path);
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
    return bytes;
}

/// Parameter count of the plain decoder (no streams, no adapters).
inline std::size_t base_param_count(const ModelConfig& cfg) {
    const auto h = static_cast<std::size_t>(cfg.hidden_size);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    const auto f = static_cast<std::size_t>(cfg.ffn_size());
    const auto n = static_cast<std::size_t>(cfg.num_layers);
    const std::size_t per_layer = 4 * h * h + 2 * h * f + 4 * h;
    return v * h + static_cast<std::size_t>(cfg.max_seq_len) * h + n * per_layer + 2 * h + h * v;
}

template <typename T>
std::size_t total_param_count(const ModelConfig& cfg, const ModelWeights<T>& w) {
    std::size_t n = 0;
    for_each_tensor(cfg, w, [&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

}  // namespace specstream
