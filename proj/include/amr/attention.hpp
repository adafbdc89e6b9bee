#pragma once

#include <random>
#include <string>

#include "amr/cloud.hpp"
#include "amr/diffcore.hpp"

namespace amr {

struct InteractionConfig {
    int layers = 3;  // L
    std::size_t heads = 4;
    std::size_t width = 64;  // D
    std::size_t ffn_hidden = 128;
    int steps = 5;  // K

    void validate() const {
        if (layers < 1) throw Error("interaction config: layers must be >= 1");
        if (steps < 1) throw Error("interaction config: steps must be >= 1");
        if (heads == 0 || width % heads != 0) throw Error("interaction config: width must be divisible by heads");
    }
};

inline std::string step_prefix(int step) { return "step" + std::to_string(step); }
inline std::string block_prefix(int step, int block) { return step_prefix(step) + "/block" + std::to_string(block); }

/// Query/Key/Value projections and the update MLP of a one-way attention path.
inline void init_one_way(ParameterSet& ps, const std::string& prefix, std::size_t width, std::size_t hidden,
                         std::mt19937_64& rng) {
    init_linear(ps, prefix + "/wq", width, width, rng);
    init_linear(ps, prefix + "/wk", width, width, rng);
    init_linear(ps, prefix + "/wv", width, width, rng);
    init_mlp2(ps, prefix + "/mlp", width, hidden, rng, 0.1);
}

/// out = F_N + MLP(F_N + softmax(Q_N K_A^T / sqrt(D)) V_A). Queries come from the
/// non-anchor rows, keys and values from the anchor rows.
inline Var one_way_attention(Graph& g, ParameterSet& ps, const std::string& prefix, Var f_anchor, Var f_non) {
    if (f_anchor.value().rows() == 0) throw Error("one_way_attention: anchor set is empty");
    ops::require(f_anchor.value().cols() == f_non.value().cols(), "one_way_attention widths");
    const std::size_t width = f_non.value().cols();
    const Var q = linear(g, ps, prefix + "/wq", f_non);
    const Var k = linear(g, ps, prefix + "/wk", f_anchor);
    const Var v = linear(g, ps, prefix + "/wv", f_anchor);
    const Var w = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(width))));
    const Var mixed = ops::add(f_non, ops::matmul(w, v));
    return ops::add(f_non, mlp2(g, ps, prefix + "/mlp", mixed));
}

inline void init_vanilla(ParameterSet& ps, const std::string& prefix, const InteractionConfig& cfg, std::mt19937_64& rng) {
    init_attention(ps, prefix + "/attn", cfg.width, rng);
    init_mlp2(ps, prefix + "/ffn", cfg.width, cfg.ffn_hidden, rng);
}

/// x <- LN(x + MHA(x, ctx, ctx)); x <- LN(x + FFN(x)).
inline Var vanilla_attention(Graph& g, ParameterSet& ps, const std::string& prefix, Var x, Var ctx, std::size_t heads) {
    const Var a = ops::layer_norm_rows(ops::add(x, multi_head_attention(g, ps, prefix + "/attn", x, ctx, ctx, heads)));
    return ops::layer_norm_rows(ops::add(a, mlp2(g, ps, prefix + "/ffn", a)));
}

inline void init_block(ParameterSet& ps, const std::string& prefix, const InteractionConfig& cfg, std::mt19937_64& rng) {
    init_vanilla(ps, prefix + "/self", cfg, rng);
    init_vanilla(ps, prefix + "/cross", cfg, rng);
    init_one_way(ps, prefix + "/ow_self", cfg.width, cfg.ffn_hidden, rng);
    init_one_way(ps, prefix + "/ow_cross", cfg.width, cfg.ffn_hidden, rng);
}

/// K disjoint interaction stacks named step1..stepK.
inline void init_step_weights(ParameterSet& ps, const InteractionConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    for (int k = 1; k <= cfg.steps; ++k)
        for (int l = 0; l < cfg.layers; ++l) init_block(ps, block_prefix(k, l), cfg, rng);
}

struct FeaturePair {
    Var p;
    Var q;
};

/// Replaces the non-anchor rows of `base` with one-way attention over the given anchor rows.
inline Var one_way_update(Graph& g, ParameterSet& ps, const std::string& prefix, Var base,
                          const std::vector<std::size_t>& nonanchors, Var anchor_source,
                          const std::vector<std::size_t>& anchors) {
    if (nonanchors.empty()) return base;
    const Var updated =
        one_way_attention(g, ps, prefix, ops::gather_rows(anchor_source, anchors), ops::gather_rows(base, nonanchors));
    return ops::scatter_rows(base, updated, nonanchors);
}

/// Vanilla self, vanilla cross, then (with a prior and anchors on both sides) one-way self
/// and one-way cross. Anchor rows are only touched by the vanilla paths.
inline FeaturePair interaction_block(Graph& g, ParameterSet& ps, const std::string& prefix, std::size_t heads, Var fp,
                                     Var fq, const AnchorPartition* partition) {
    const Var sp = vanilla_attention(g, ps, prefix + "/self", fp, fp, heads);
    const Var sq = vanilla_attention(g, ps, prefix + "/self", fq, fq, heads);
    Var cp = vanilla_attention(g, ps, prefix + "/cross", sp, sq, heads);
    Var cq = vanilla_attention(g, ps, prefix + "/cross", sq, sp, heads);
    if (!partition || partition->anchors_p.empty() || partition->anchors_q.empty()) return {cp, cq};

    const auto& ap = partition->anchors_p;
    const auto& aq = partition->anchors_q;
    const Var op = one_way_update(g, ps, prefix + "/ow_self", cp, partition->nonanchors_p, cp, ap);
    const Var oq = one_way_update(g, ps, prefix + "/ow_self", cq, partition->nonanchors_q, cq, aq);
    const Var xp = one_way_update(g, ps, prefix + "/ow_cross", op, partition->nonanchors_p, oq, aq);
    const Var xq = one_way_update(g, ps, prefix + "/ow_cross", oq, partition->nonanchors_q, op, ap);
    return {xp, xq};
}

/// Applies the L blocks of step model `step`. A null partition runs the prior-free (vanilla) stack.
inline FeaturePair run_stack(Graph& g, ParameterSet& ps, Var fp, Var fq, const AnchorPartition* partition, int step,
                             const InteractionConfig& cfg) {
    cfg.validate();
    if (step < 1 || step > cfg.steps) throw Error("run_stack: step index out of range");
    ops::require(fp.value().cols() == cfg.width && fq.value().cols() == cfg.width, "run_stack feature width");
    FeaturePair f{fp, fq};
    for (int l = 0; l < cfg.layers; ++l) f = interaction_block(g, ps, block_prefix(step, l), cfg.heads, f.p, f.q, partition);
    return f;
}

}  // namespace amr
