// Command-line surface for the speculative-streaming toy engine: model init,
// training on synthetic languages, speculative decoding with metrics,
// (gamma, k, tau) benchmark sweeps and the analytic latency-parity grid.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "specstream/config.hpp"
#include "specstream/decoder.hpp"
#include "specstream/errors.hpp"
#include "specstream/model.hpp"
#include "specstream/perf.hpp"
#include "specstream/training.hpp"
#include "specstream/weights.hpp"

namespace {

using namespace specstream;
using nlohmann::ordered_json;

constexpr int kDocSchemaVersion = 1;

ModelConfig read_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open config: " + path);
    return config_from_json(nlohmann::json::parse(f, nullptr, true, true));
}

nlohmann::json read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open manifest: " + path);
    return nlohmann::json::parse(f);
}

std::string blob_path_for(const std::string& manifest_path, const nlohmann::json& manifest) {
    std::string blob = manifest.value("blob", "");
    if (blob.empty()) throw LoadError("manifest has no blob field");
    const auto slash = manifest_path.find_last_of('/');
    return slash == std::string::npos ? blob : manifest_path.substr(0, slash + 1) + blob;
}

template <typename T>
Model<T> read_model(const std::string& config_path, const std::string& manifest_path) {
    ModelConfig cfg = read_config(config_path);
    auto manifest = read_manifest(manifest_path);
    auto blob = read_file_bytes(blob_path_for(manifest_path, manifest));
    return load_model<T>(cfg, manifest, blob);
}

std::vector<int> parse_tokens(const std::string& text) {
    std::vector<int> out;
    std::istringstream in(text);
    for (std::string tok; in >> tok;) out.push_back(std::stoi(tok));
    return out;
}

std::vector<double> parse_taus(const std::string& text) {
    std::vector<double> out;
    std::stringstream in(text);
    for (std::string part; std::getline(in, part, ',');) out.push_back(std::stod(part));
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream f(path);
    if (!f) throw LoadError("cannot write: " + path);
    f << text;
}

ordered_json metrics_to_json(const DecodeMetrics& m) {
    ordered_json j;
    j["generated_tokens"] = m.generated_tokens;
    j["target_calls"] = m.target_calls;
    j["cr_ratio"] = m.cr_ratio();
    ordered_json hist;
    for (const auto& [beta, count] : m.beta_histogram) hist[std::to_string(beta)] = count;
    j["beta_histogram"] = hist;
    j["pruned_nodes"] = m.pruned_nodes;
    j["mean_tree_size_post_prune"] = m.mean_tree_size_post_prune();
    j["muladds"] = m.muladds;
    return j;
}

struct CommonOpts {
    std::string config_path;
    std::string model_path;
    std::string precision = "f32";
    std::string out;
};

struct DecodeOpts {
    CommonOpts common;
    std::string prompt_text;
    std::string prompt_file;
    int gamma = -1;
    int k = 1;
    double tau = 0.05;
    int max_new = 32;
    int eos = -1;
    bool compare = false;
    bool sample = false;
    double temperature = 1.0;
    int top_k = 0;
    std::uint64_t seed = 0;
    std::string dump_trees;
};

template <typename T>
int run_decode(const DecodeOpts& o) {
    auto model = read_model<T>(o.common.config_path, o.common.model_path);
    std::vector<int> prompt;
    if (!o.prompt_file.empty()) {
        std::ifstream f(o.prompt_file);
        if (!f) throw LoadError("cannot open prompt file: " + o.prompt_file);
        std::stringstream ss;
        ss << f.rdbuf();
        prompt = parse_tokens(ss.str());
    } else {
        prompt = parse_tokens(o.prompt_text);
    }

    GenerateParams params;
    params.gamma = o.gamma;
    params.k = o.k;
    params.tau = o.tau;
    params.max_new_tokens = o.max_new;
    params.eos_token = o.eos;
    params.sampling.sample = o.sample;
    params.sampling.temperature = o.temperature;
    params.sampling.top_k = o.top_k;
    params.sampling.seed = o.seed;

    std::vector<TreeDraft> trees;
    auto result = generate(model, prompt, params, o.dump_trees.empty() ? nullptr : &trees);

    ordered_json doc;
    doc["schema_version"] = kDocSchemaVersion;
    doc["prompt"] = prompt;
    doc["tokens"] = result.tokens;
    doc["metrics"] = metrics_to_json(result.metrics);
    if (o.compare) {
        auto ref = reference_generate(model, prompt, o.max_new, o.eos, params.sampling);
        doc["compare"]["match"] = ref.tokens == result.tokens;
        doc["compare"]["reference_tokens"] = ref.tokens;
        doc["compare"]["reference_target_calls"] = ref.metrics.target_calls;
    }
    write_text(o.common.out, doc.dump(2) + "\n");

    if (!o.dump_trees.empty()) {
        ordered_json dump;
        dump["schema_version"] = kDocSchemaVersion;
        dump["passes"] = ordered_json::array();
        for (std::size_t p = 0; p < trees.size(); ++p) {
            ordered_json pass;
            pass["pass"] = p;
            pass["committed_length"] = trees[p].committed_length;
            pass["nodes"] = ordered_json::array();
            for (const auto& n : trees[p].nodes) {
                pass["nodes"].push_back(ordered_json{{"token", n.token},
                                                     {"parent", n.parent},
                                                     {"depth", n.depth},
                                                     {"stream", n.stream}});
            }
            dump["passes"].push_back(std::move(pass));
        }
        write_text(o.dump_trees, dump.dump(2) + "\n");
    }
    return 0;
}

struct BenchOpts {
    CommonOpts common;
    std::string language = "counting";
    std::uint64_t lang_seed = 0;
    int num_prompts = 8;
    int prompt_len = 4;
    int max_new = 24;
    std::string taus = "0,0.05";
    int max_gamma = 4;
    int max_k = 3;
};

template <typename T>
int run_bench(const BenchOpts& o) {
    auto model = read_model<T>(o.common.config_path, o.common.model_path);
    SyntheticLanguage lang(language_kind_from_string(o.language), model.config().vocab_size,
                           o.lang_seed);
    const int gamma_cap = std::min(o.max_gamma, model.config().num_streams);
    std::ostringstream csv;
    csv << "# schema_version=" << kDocSchemaVersion << "\n";
    csv << "gamma,k,tau,cr_ratio,mean_tree_size_post_prune,flop_proxy_per_token,"
           "pruned_nodes_per_pass\n";
    for (int gamma = 1; gamma <= gamma_cap; ++gamma) {
        for (int k = 1; k <= o.max_k; ++k) {
            for (double tau : parse_taus(o.taus)) {
                double cr = 0, tree = 0, flops = 0, pruned = 0;
                for (int i = 0; i < o.num_prompts; ++i) {
                    GenerateParams params;
                    params.gamma = gamma;
                    params.k = k;
                    params.tau = tau;
                    params.max_new_tokens = o.max_new;
                    auto prompt = lang.make_prompt(1000 + static_cast<std::uint64_t>(i),
                                                   o.prompt_len);
                    auto res = generate(model, prompt, params);
                    cr += res.metrics.cr_ratio();
                    tree += res.metrics.mean_tree_size_post_prune();
                    flops += static_cast<double>(res.metrics.muladds) /
                             static_cast<double>(res.metrics.generated_tokens);
                    pruned += res.metrics.tree_passes == 0
                                  ? 0.0
                                  : static_cast<double>(res.metrics.pruned_nodes) /
                                        static_cast<double>(res.metrics.tree_passes);
                }
                const double n = o.num_prompts;
                char line[256];
                std::snprintf(line, sizeof line, "%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g\n", gamma,
                              k, tau, cr / n, tree / n, flops / n, pruned / n);
                csv << line;
            }
        }
    }
    write_text(o.common.out, csv.str());
    return 0;
}

struct TrainOpts {
    CommonOpts common;
    std::string out_prefix;
    std::string curve_path;
    std::string language = "counting";
    std::uint64_t lang_seed = 0;
    std::uint64_t seed = 0;
    int steps = 600;
    int batch = 8;
    double lr = 0.3;
    double alpha0 = 1.0;
    double alpha_j = 0.1;
    double ee_weight = 1.0;
    int ctx_len = 4;
    int tgt_len = 28;
    std::string optimizer = "sgd";
    int log_every = 50;
};

template <typename T>
int run_train(const TrainOpts& o) {
    ModelConfig cfg = read_config(o.common.config_path);
    Model<T> model = o.common.model_path.empty()
                         ? Model<T>(cfg, init_weights<T>(cfg, o.seed))
                         : read_model<T>(o.common.config_path, o.common.model_path);
    SyntheticLanguage lang(language_kind_from_string(o.language), cfg.vocab_size, o.lang_seed);

    TrainConfig tc;
    tc.steps = o.steps;
    tc.batch_size = o.batch;
    tc.learning_rate = o.lr;
    tc.optimizer = o.optimizer == "adam" ? Optimizer::kAdam : Optimizer::kSgd;
    tc.weights = LossWeights::uniform(cfg.num_streams, o.alpha0, o.alpha_j);
    tc.ee_weight = o.ee_weight;
    tc.seed = o.seed;
    tc.context_len = o.ctx_len;
    tc.target_len = o.tgt_len;
    tc.log_every = o.log_every;
    auto stats = train(model, lang, tc);

    save_weights(cfg, model.weights(), o.out_prefix + ".manifest.json", o.out_prefix + ".bin");
    std::ofstream cf(o.out_prefix + ".config.json");
    cf << to_json(cfg).dump(2) << "\n";

    std::ostringstream csv;
    csv << "# schema_version=" << kDocSchemaVersion << "\n";
    csv << "step,speculative_loss,main_nll";
    for (int j = 1; j <= cfg.num_streams; ++j) csv << ",stream_" << j << "_nll";
    csv << ",early_exit_nll\n";
    for (const auto& pt : stats.curve) {
        csv << pt.step;
        char buf[64];
        std::snprintf(buf, sizeof buf, ",%.10g,%.10g", pt.speculative_loss, pt.main_nll);
        csv << buf;
        for (double s : pt.stream_nll) {
            std::snprintf(buf, sizeof buf, ",%.10g", s);
            csv << buf;
        }
        std::snprintf(buf, sizeof buf, ",%.10g\n", pt.early_exit_nll);
        csv << buf;
    }
    write_text(o.curve_path, csv.str());

    std::fprintf(stderr, "trained %d steps; final main NLL %.6f, speculative loss %.6f\n",
                 o.steps, stats.final_loss.main_nll_mean, stats.final_loss.speculative_loss);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"speculative-streaming toy engine"};
    app.require_subcommand(1);

    // ---- init ----
    std::string init_config, init_out;
    std::uint64_t init_seed = 0;
    std::string init_mode;
    double init_epsilon = -1.0;
    int init_gamma = -1;
    auto* init = app.add_subcommand("init", "write a randomly initialized weight container");
    init->add_option("--config", init_config, "model config JSON")->required();
    init->add_option("--seed", init_seed, "init seed");
    init->add_option("--out", init_out, "output prefix (PREFIX.{config.json,manifest.json,bin})")
        ->required();
    init->add_option("--stream-mode", init_mode, "override stream mode (embedding|rotation)");
    init->add_option("--epsilon", init_epsilon, "override rotation step (radians)");
    init->add_option("--gamma", init_gamma, "override stream count");

    // ---- decode ----
    DecodeOpts dec;
    auto* decode = app.add_subcommand("decode", "speculative decoding with metrics");
    decode->add_option("--config", dec.common.config_path)->required();
    decode->add_option("--model", dec.common.model_path, "weight manifest")->required();
    decode->add_option("--prompt", dec.prompt_text, "whitespace-separated token ids");
    decode->add_option("--prompt-file", dec.prompt_file, "file with token ids");
    decode->add_option("--gamma", dec.gamma, "streams to use (-1 = model's)");
    decode->add_option("--k", dec.k, "tokens sampled per stream");
    decode->add_option("--tau", dec.tau, "tree-pruning threshold");
    decode->add_option("--max-new", dec.max_new);
    decode->add_option("--eos", dec.eos, "eos token id (-1 = none)");
    decode->add_flag("--compare", dec.compare, "also run the reference decoder and compare");
    decode->add_flag("--sample", dec.sample, "temperature/top-k sampling instead of greedy");
    decode->add_option("--temperature", dec.temperature);
    decode->add_option("--top-k", dec.top_k, "sampling pool size (0 = full vocab)");
    decode->add_option("--seed", dec.seed, "sampling seed");
    decode->add_option("--precision", dec.common.precision, "f32|f64");
    decode->add_option("--dump-trees", dec.dump_trees, "write per-pass draft trees to this file");
    decode->add_option("--out", dec.common.out, "output JSON path (default stdout)");

    // ---- bench ----
    BenchOpts bench;
    auto* bn = app.add_subcommand("bench", "CR/FLOP sweep over (gamma, k, tau)");
    bn->add_option("--config", bench.common.config_path)->required();
    bn->add_option("--model", bench.common.model_path)->required();
    bn->add_option("--language", bench.language, "counting|motif|lookup");
    bn->add_option("--lang-seed", bench.lang_seed);
    bn->add_option("--num-prompts", bench.num_prompts);
    bn->add_option("--prompt-len", bench.prompt_len);
    bn->add_option("--max-new", bench.max_new);
    bn->add_option("--taus", bench.taus, "comma-separated tau grid");
    bn->add_option("--max-gamma", bench.max_gamma);
    bn->add_option("--max-k", bench.max_k);
    bn->add_option("--precision", bench.common.precision, "f32|f64");
    bn->add_option("--out", bench.common.out, "output CSV path (default stdout)");

    // ---- perf ----
    int perf_gamma = 4;
    double perf_css = 1.0;
    std::string perf_out;
    auto* perf = app.add_subcommand("perf", "analytic speedup grid vs draft-target decoding");
    perf->add_option("--gamma", perf_gamma);
    perf->add_option("--css-ratio", perf_css, "C_ss / C_target");
    perf->add_option("--out", perf_out, "output CSV path (default stdout)");

    // ---- train ----
    TrainOpts tr;
    auto* train_cmd = app.add_subcommand("train", "train on a synthetic language");
    train_cmd->add_option("--config", tr.common.config_path)->required();
    train_cmd->add_option("--model", tr.common.model_path, "start from this container");
    train_cmd->add_option("--out", tr.out_prefix, "checkpoint prefix")->required();
    train_cmd->add_option("--curve", tr.curve_path, "loss-curve CSV path (default stdout)");
    train_cmd->add_option("--language", tr.language, "counting|motif|lookup");
    train_cmd->add_option("--lang-seed", tr.lang_seed);
    train_cmd->add_option("--seed", tr.seed, "init/batch seed");
    train_cmd->add_option("--steps", tr.steps);
    train_cmd->add_option("--batch", tr.batch);
    train_cmd->add_option("--lr", tr.lr);
    train_cmd->add_option("--alpha0", tr.alpha0, "next-token loss weight");
    train_cmd->add_option("--alpha-j", tr.alpha_j, "per-stream loss weight");
    train_cmd->add_option("--ee-weight", tr.ee_weight, "early-exit adapter loss weight");
    train_cmd->add_option("--ctx-len", tr.ctx_len);
    train_cmd->add_option("--tgt-len", tr.tgt_len);
    train_cmd->add_option("--optimizer", tr.optimizer, "sgd|adam");
    train_cmd->add_option("--log-every", tr.log_every);
    train_cmd->add_option("--precision", tr.common.precision, "f32|f64");

    CLI11_PARSE(app, argc, argv);

    try {
        if (init->parsed()) {
            ModelConfig cfg = read_config(init_config);
            if (!init_mode.empty()) {
                cfg.stream_mode = stream_mode_from_string(init_mode);
                if (cfg.stream_mode == StreamMode::kEmbedding) cfg.rotation_step = 0.0;
            }
            if (init_epsilon >= 0.0) cfg.rotation_step = init_epsilon;
            if (init_gamma >= 0) cfg.num_streams = init_gamma;
            cfg.validate();
            auto weights = init_weights<float>(cfg, init_seed);
            save_weights(cfg, weights, init_out + ".manifest.json", init_out + ".bin");
            std::ofstream cf(init_out + ".config.json");
            if (!cf) throw LoadError("cannot write config: " + init_out + ".config.json");
            cf << to_json(cfg).dump(2) << "\n";
            return 0;
        }
        if (decode->parsed()) {
            return dec.common.precision == "f64" ? run_decode<double>(dec) : run_decode<float>(dec);
        }
        if (bn->parsed()) {
            return bench.common.precision == "f64" ? run_bench<double>(bench)
                                                   : run_bench<float>(bench);
        }
        if (perf->parsed()) {
            std::ostringstream csv;
            csv << "# schema_version=" << kDocSchemaVersion << "\n";
            csv << "ratio,zeta_over_beta,speedup\n";
            for (const auto& cell : speedup_grid(perf_gamma, perf_css)) {
                char line[128];
                std::snprintf(line, sizeof line, "%.10g,%.10g,%.10g\n", cell.target_over_draft,
                              cell.zeta_over_beta, cell.speedup);
                csv << line;
            }
            write_text(perf_out, csv.str());
            return 0;
        }
        if (train_cmd->parsed()) {
            return tr.common.precision == "f32" ? run_train<float>(tr) : run_train<double>(tr);
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
