#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include <json.hpp>

#include "specstream/errors.hpp"

namespace specstream {

enum class StreamMode { kEmbedding, kRotation };

inline std::string to_string(StreamMode m) {
    return m == StreamMode::kEmbedding ? "embedding" : "rotation";
}

inline StreamMode stream_mode_from_string(const std::string& s) {
    if (s == "embedding") return StreamMode::kEmbedding;
    if (s == "rotation") return StreamMode::kRotation;
    throw LoadError("unknown stream_mode \"" + s + "\" (expected embedding|rotation)");
}

/// Static shape of a model. num_msa_layers is the number of layers, counted
/// from the top of the stack, that process speculative streams alongside the
/// main stream; the split point is num_layers - num_msa_layers.
struct ModelConfig {
    int vocab_size = 0;
    int hidden_size = 0;
    int num_heads = 1;
    int num_layers = 0;
    int num_msa_layers = 0;
    int num_streams = 0;       // gamma; 0 degenerates to a plain decoder
    int stream_init_rank = 0;  // eta; 0 means identity transform
    int prune_adapter_rank = 0;
    StreamMode stream_mode = StreamMode::kEmbedding;
    double rotation_step = 0.0;  // epsilon, radians; rotation mode only
    int max_seq_len = 0;

    int split_layer() const { return num_layers - num_msa_layers; }
    int head_dim() const { return hidden_size / num_heads; }
    int ffn_size() const { return 4 * hidden_size; }

    double max_rotation_step() const {
        return M_PI / (2.0 * static_cast<double>(max_seq_len + num_streams));
    }

    void validate() const {
        if (vocab_size < 2) throw LoadError("config: vocab_size must be >= 2");
        if (hidden_size < 1) throw LoadError("config: hidden_size must be >= 1");
        if (num_heads < 1 || hidden_size % num_heads != 0) {
            throw LoadError("config: hidden_size must be divisible by num_heads");
        }
        if (num_layers < 2) throw LoadError("config: num_layers must be >= 2");
        if (num_msa_layers < 1 || num_msa_layers >= num_layers) {
            throw LoadError("config: need 1 <= num_msa_layers < num_layers");
        }
        if (num_streams < 0) throw LoadError("config: num_streams must be >= 0");
        if (stream_init_rank < 0) throw LoadError("config: stream_init_rank must be >= 0");
        if (prune_adapter_rank < 1) throw LoadError("config: prune_adapter_rank must be >= 1");
        if (max_seq_len < 1) throw LoadError("config: max_seq_len must be >= 1");
        if (stream_mode == StreamMode::kRotation) {
            if (hidden_size % 2 != 0) {
                throw LoadError("config: rotation mode requires even hidden_size");
            }
            if (rotation_step < 0.0 || rotation_step > max_rotation_step()) {
                throw LoadError("config: rotation_step outside [0, pi/(2*(max_seq_len+num_streams))]");
            }
        } else if (rotation_step != 0.0) {
            throw LoadError("config: rotation_step is only meaningful in rotation mode");
        }
    }
};

inline constexpr int kConfigSchemaVersion = 1;

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["vocab_size"] = c.vocab_size;
    j["hidden_size"] = c.hidden_size;
    j["num_heads"] = c.num_heads;
    j["num_layers"] = c.num_layers;
    j["num_msa_layers"] = c.num_msa_layers;
    j["num_streams"] = c.num_streams;
    j["stream_init_rank"] = c.stream_init_rank;
    j["prune_adapter_rank"] = c.prune_adapter_rank;
    j["stream_mode"] = to_string(c.stream_mode);
    j["rotation_step"] = c.rotation_step;
    j["max_seq_len"] = c.max_seq_len;
    return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        if (j.at("schema_version").get<int>() != kConfigSchemaVersion) {
            throw LoadError("config: unsupported schema_version");
        }
        c.vocab_size = j.at("vocab_size").get<int>();
        c.hidden_size = j.at("hidden_size").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.num_layers = j.at("num_layers").get<int>();
        c.num_msa_layers = j.at("num_msa_layers").get<int>();
        c.num_streams = j.at("num_streams").get<int>();
        c.stream_init_rank = j.at("stream_init_rank").get<int>();
        c.prune_adapter_rank = j.at("prune_adapter_rank").get<int>();
        c.stream_mode = stream_mode_from_string(j.at("stream_mode").get<std::string>());
        c.rotation_step = j.at("rotation_step").get<double>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace specstream
