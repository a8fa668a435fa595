#pragma once

#include <cstdint>
#include <vector>

#include "specstream/config.hpp"
#include "specstream/errors.hpp"
#include "specstream/model.hpp"

namespace specstream {

/// Abstract per-forward latency costs and acceptance rates for comparing
/// draft-target speculative decoding against speculative streaming.
/// zeta = tokens advanced per draft-target verification cycle,
/// beta = tokens advanced per streaming pass.
struct PerfParams {
    int gamma = 4;
    double c_draft = 1.0;
    double c_target = 10.0;
    double c_ss = 10.0;
    double zeta = 1.0;
    double beta = 1.0;

    void validate() const {
        if (gamma < 1) throw ParamError("perf: gamma must be >= 1");
        if (c_draft <= 0 || c_target <= 0 || c_ss <= 0) {
            throw ParamError("perf: latency costs must be positive");
        }
        if (zeta <= 0 || zeta > gamma + 1 || beta <= 0 || beta > gamma + 1) {
            throw ParamError("perf: advancement rates must lie in (0, gamma+1]");
        }
    }
};

/// Draft-target advancement needed for latency parity with streaming:
/// (gamma*C_draft + C_target)/zeta = C_ss/beta solved for zeta.
inline double parity_zeta(const PerfParams& p) {
    p.validate();
    return p.beta * (static_cast<double>(p.gamma) * p.c_draft + p.c_target) / p.c_ss;
}

/// Streaming speedup over the draft-target scheme: per-token latency of
/// draft-target divided by per-token latency of streaming. > 1 means
/// streaming wins.
inline double speedup_over_draft_target(const PerfParams& p) {
    p.validate();
    const double draft_target = (static_cast<double>(p.gamma) * p.c_draft + p.c_target) / p.zeta;
    const double streaming = p.c_ss / p.beta;
    return draft_target / streaming;
}

struct PerfGridCell {
    double target_over_draft = 0.0;  // C_target / C_draft
    double zeta_over_beta = 0.0;
    double speedup = 0.0;
};

/// Speedup surface over target/draft latency ratios 2..20 and zeta/beta
/// 0.5..2.0 (step 0.1), with C_ss = css_over_ctarget * C_target. Pure
/// function of its arguments, reproducible bit-exactly.
inline std::vector<PerfGridCell> speedup_grid(int gamma, double css_over_ctarget = 1.0) {
    std::vector<PerfGridCell> grid;
    for (int r = 2; r <= 20; ++r) {
        for (int i = 0; i <= 15; ++i) {
            PerfParams p;
            p.gamma = gamma;
            p.c_draft = 1.0;
            p.c_target = static_cast<double>(r);
            p.c_ss = css_over_ctarget * p.c_target;
            p.beta = 1.0;
            p.zeta = static_cast<double>(5 + i) / 10.0;
            grid.push_back(PerfGridCell{p.c_target, p.zeta, speedup_over_draft_target(p)});
        }
    }
    return grid;
}

/// Closed-form multiply-add count for one tree verification pass, split into
/// main-stream and speculative-stream contributions. Mirrors the counter
/// instrumented into Model::forward (dense-rectangle attention accounting,
/// streams on every node, no pruning removals).
struct FlopEstimate {
    std::uint64_t main_ops = 0;
    std::uint64_t stream_ops = 0;

    std::uint64_t total() const { return main_ops + stream_ops; }

    /// Stream share relative to a pass where streams would ride the full
    /// stack next to the main rows; approaches (N_s/N) * (gamma/(1+gamma))
    /// once attention cost dominates the per-row fixed cost.
    double stream_fraction_of_full_stack(int gamma) const {
        if (gamma == 0 || main_ops == 0) return 0.0;
        return static_cast<double>(stream_ops) /
               (static_cast<double>(1 + gamma) * static_cast<double>(main_ops));
    }
};

inline FlopEstimate flop_estimate(const ModelConfig& cfg, std::size_t committed_len,
                                  std::size_t tree_size, int gamma = -1,
                                  bool prune_adapter_ran = false) {
    const std::uint64_t h = static_cast<std::uint64_t>(cfg.hidden_size);
    const std::uint64_t v = static_cast<std::uint64_t>(cfg.vocab_size);
    const std::uint64_t n = tree_size;
    const std::uint64_t c = committed_len;
    const std::uint64_t g = gamma < 0 ? static_cast<std::uint64_t>(cfg.num_streams)
                                      : static_cast<std::uint64_t>(gamma);
    const std::uint64_t lower = static_cast<std::uint64_t>(cfg.split_layer());
    const std::uint64_t upper = static_cast<std::uint64_t>(cfg.num_msa_layers);
    auto row_cost = [&](std::uint64_t kv_rows) { return 12 * h * h + 2 * kv_rows * h; };

    FlopEstimate e;
    e.main_ops += lower * n * row_cost(c + n);
    if (prune_adapter_ran) {
        e.main_ops += n * (2 * h * static_cast<std::uint64_t>(cfg.prune_adapter_rank) + h * v);
    }
    const std::uint64_t kv_msa = c + n + n * g;
    e.main_ops += upper * n * row_cost(kv_msa);
    e.stream_ops += upper * n * g * row_cost(kv_msa);
    if (g > 0 && cfg.stream_mode == StreamMode::kEmbedding && cfg.stream_init_rank > 0) {
        e.stream_ops += 2 * n * h * static_cast<std::uint64_t>(cfg.stream_init_rank);
    }
    e.main_ops += n * h * v;
    e.stream_ops += n * g * h * v;
    return e;
}

}  // namespace specstream
