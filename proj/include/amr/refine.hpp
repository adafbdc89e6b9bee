#pragma once

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "amr/attention.hpp"
#include "amr/cloud.hpp"
#include "amr/estimation.hpp"
#include "amr/features.hpp"
#include "amr/matching.hpp"

namespace amr {

struct PipelineConfig {
    double fine_voxel = 0.025;
    double super_voxel = 0.2;
    std::size_t neighbors = 16;
    EncoderConfig encoder;
    InteractionConfig interaction;
    std::size_t top_k = 32;
    double conf_thresh = 0.05;
    std::string estimator = "lgr";  // "lgr" or "ransac"
    double inlier_radius = 0.05;
    int lgr_iters = 5;
    int ransac_iters = 1000;
    bool ransac_weighted = true;
    double overlap_radius = 0.05;
    double anchor_threshold = 0.0;
    std::uint64_t seed = 0;

    int steps() const { return interaction.steps; }

    void validate() const {
        if (!(fine_voxel > 0.0) || !(super_voxel > fine_voxel)) throw Error("pipeline: need super_voxel > fine_voxel > 0");
        if (neighbors < 4) throw Error("pipeline: neighbors must be >= 4");
        if (encoder.super_width != interaction.width) throw Error("pipeline: encoder width must equal interaction width");
        interaction.validate();
        if (top_k < 1) throw Error("pipeline: top_k must be >= 1");
        if (estimator != "lgr" && estimator != "ransac") throw Error("pipeline: estimator must be lgr or ransac");
        if (!(inlier_radius > 0.0) || !(overlap_radius > 0.0)) throw Error("pipeline: radii must be positive");
        if (lgr_iters < 0 || ransac_iters < 1) throw Error("pipeline: bad estimator iteration counts");
    }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
    return {{"fine_voxel", c.fine_voxel},
            {"super_voxel", c.super_voxel},
            {"neighbors", c.neighbors},
            {"super_width", c.encoder.super_width},
            {"fine_width", c.encoder.fine_width},
            {"encoder_hidden", c.encoder.hidden},
            {"layers", c.interaction.layers},
            {"heads", c.interaction.heads},
            {"ffn_hidden", c.interaction.ffn_hidden},
            {"K", c.interaction.steps},
            {"top_k", c.top_k},
            {"conf_thresh", c.conf_thresh},
            {"estimator", c.estimator},
            {"inlier_radius", c.inlier_radius},
            {"lgr_iters", c.lgr_iters},
            {"ransac_iters", c.ransac_iters},
            {"ransac_weighted", c.ransac_weighted},
            {"overlap_radius", c.overlap_radius},
            {"anchor_threshold", c.anchor_threshold},
            {"seed", c.seed}};
}

/// Applies the keys of `j` on top of `c`; unknown keys are rejected.
inline void apply_json(PipelineConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("pipeline config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "fine_voxel") c.fine_voxel = v.get<double>();
        else if (key == "super_voxel") c.super_voxel = v.get<double>();
        else if (key == "neighbors") c.neighbors = v.get<std::size_t>();
        else if (key == "super_width") c.encoder.super_width = c.interaction.width = v.get<std::size_t>();
        else if (key == "fine_width") c.encoder.fine_width = v.get<std::size_t>();
        else if (key == "encoder_hidden") c.encoder.hidden = v.get<std::size_t>();
        else if (key == "layers") c.interaction.layers = v.get<int>();
        else if (key == "heads") c.interaction.heads = v.get<std::size_t>();
        else if (key == "ffn_hidden") c.interaction.ffn_hidden = v.get<std::size_t>();
        else if (key == "K") c.interaction.steps = v.get<int>();
        else if (key == "top_k") c.top_k = v.get<std::size_t>();
        else if (key == "conf_thresh") c.conf_thresh = v.get<double>();
        else if (key == "estimator") c.estimator = v.get<std::string>();
        else if (key == "inlier_radius") c.inlier_radius = v.get<double>();
        else if (key == "lgr_iters") c.lgr_iters = v.get<int>();
        else if (key == "ransac_iters") c.ransac_iters = v.get<int>();
        else if (key == "ransac_weighted") c.ransac_weighted = v.get<bool>();
        else if (key == "overlap_radius") c.overlap_radius = v.get<double>();
        else if (key == "anchor_threshold") c.anchor_threshold = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw Error("pipeline config: unknown key \"" + key + "\"");
    }
    c.validate();
}

/// Shared encoder plus K step-specific interaction stacks ("step1".."stepK").
struct RefinementPipeline {
    PipelineConfig config;
    ParameterSet params;

    static RefinementPipeline create(const PipelineConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        RefinementPipeline p{cfg, {}};
        std::mt19937_64 rng(seed);
        init_encoder(p.params, cfg.encoder, rng);
        init_step_weights(p.params, cfg.interaction, rng);
        p.params.add("matching/slack", Tensor({1}, {0.0}));
        return p;
    }
};

/// Geometry and descriptors of a cloud pair; independent of the step and the prior.
struct PairContext {
    HierarchicalCloud hp;
    HierarchicalCloud hq;
    Descriptors dp;
    Descriptors dq;
};

inline PairContext prepare_pair(const PipelineConfig& cfg, const PointCloud& p, const PointCloud& q) {
    PairContext ctx;
    ctx.hp = build_hierarchy(p, cfg.fine_voxel, cfg.super_voxel);
    ctx.hq = build_hierarchy(q, cfg.fine_voxel, cfg.super_voxel);
    ctx.dp = describe(ctx.hp, cfg.neighbors);
    ctx.dq = describe(ctx.hq, cfg.neighbors);
    return ctx;
}

/// Raised when the estimator of a given step fails.
class StepError : public EstimationError {
public:
    StepError(int step, const std::string& what)
        : EstimationError("step " + std::to_string(step) + ": " + what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

struct StepResult {
    RigidTransform transform;
    EstimatorReport report;
    std::size_t anchors_p = 0;
    std::size_t anchors_q = 0;
    bool had_prior = false;
    CorrespondenceSet correspondences;
};

/// Observer called at the start of each step with the prior it receives and the resulting partition.
using StepObserver = std::function<void(int step, const std::optional<RigidTransform>& prior, const AnchorPartition* partition)>;

/// Feature forward pass of step `step`: encoder, then the step's interaction stack.
struct StepFeatures {
    Tensor super_p, super_q, fine_p, fine_q;
};

inline StepFeatures step_features(RefinementPipeline& pipe, int step, const PairContext& ctx,
                                  const AnchorPartition* partition) {
    Graph g;
    const FeatureMap fp = encode(g, pipe.params, ctx.dp);
    const FeatureMap fq = encode(g, pipe.params, ctx.dq);
    const FeaturePair out = run_stack(g, pipe.params, fp.super, fq.super, partition, step, pipe.config.interaction);
    return {out.p.value(), out.q.value(), fp.fine.value(), fq.fine.value()};
}

/// One refinement model: features, anchors under the prior (skipped without one), the
/// step's interaction stack, coarse-to-fine matching, and the robust estimator.
inline StepResult refine_step(RefinementPipeline& pipe, int step, const PairContext& ctx,
                              const std::optional<RigidTransform>& prior, const StepObserver& observer = {}) {
    const auto& cfg = pipe.config;
    if (step < 1 || step > cfg.steps()) throw Error("refine_step: step index out of range");
    std::optional<AnchorPartition> partition;
    if (prior) partition = anchor_split(ctx.hp, ctx.hq, *prior, cfg.overlap_radius, cfg.anchor_threshold);
    if (observer) observer(step, prior, partition ? &*partition : nullptr);

    const StepFeatures f = step_features(pipe, step, ctx, partition ? &*partition : nullptr);
    StepResult res;
    res.had_prior = prior.has_value();
    if (partition) {
        res.anchors_p = partition->anchors_p.size();
        res.anchors_q = partition->anchors_q.size();
    }
    try {
        const auto coarse = coarse_match(f.super_p, f.super_q, cfg.top_k);
        res.correspondences = fine_match(coarse, ctx.hp, ctx.hq, f.fine_p, f.fine_q, cfg.conf_thresh);
        if (cfg.estimator == "lgr") {
            res.report = lgr(res.correspondences, ctx.hp, ctx.hq, {cfg.inlier_radius, cfg.lgr_iters});
        } else {
            const auto pairs = to_pairs(res.correspondences, ctx.hp, ctx.hq);
            res.report = ransac(pairs, {cfg.ransac_iters, cfg.inlier_radius, cfg.seed + static_cast<std::uint64_t>(step),
                                        cfg.ransac_weighted});
        }
    } catch (const Error& e) {
        throw StepError(step, e.what());
    }
    res.transform = res.report.transform;
    return res;
}

struct Trajectory {
    std::optional<RigidTransform> initial;  // X_0; none runs the first step prior-free
    std::vector<StepResult> steps;          // X_1 .. X_k
    std::optional<std::string> failure;
    int failed_step = 0;

    /// X_K, or the last successful estimate (falling back to X_0, then identity).
    RigidTransform final_transform() const {
        if (!steps.empty()) return steps.back().transform;
        return initial.value_or(RigidTransform::identity());
    }
};

/// X_k = f_k(X_{k-1}, P, Q) for k = 1..steps (all K models by default).
inline Trajectory run_pipeline(RefinementPipeline& pipe, const PairContext& ctx, const std::optional<RigidTransform>& x0,
                               std::optional<int> steps = std::nullopt, const StepObserver& observer = {}) {
    const int k_max = steps.value_or(pipe.config.steps());
    if (k_max < 1 || k_max > pipe.config.steps()) throw Error("run_pipeline: step count out of range");
    Trajectory t;
    t.initial = x0;
    std::optional<RigidTransform> prior = x0;
    for (int k = 1; k <= k_max; ++k) {
        try {
            t.steps.push_back(refine_step(pipe, k, ctx, prior, observer));
        } catch (const StepError& e) {
            t.failure = e.what();
            t.failed_step = k;
            break;
        }
        prior = t.steps.back().transform;
    }
    return t;
}

inline Trajectory run_pipeline(RefinementPipeline& pipe, const PointCloud& p, const PointCloud& q,
                               const std::optional<RigidTransform>& x0, std::optional<int> steps = std::nullopt) {
    return run_pipeline(pipe, prepare_pair(pipe.config, p, q), x0, steps);
}

inline nlohmann::json to_json(const Trajectory& t) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : t.steps) {
        nlohmann::json j = to_json(s.transform);
        j["inliers"] = s.report.inliers;
        j["anchors_p"] = s.anchors_p;
        j["anchors_q"] = s.anchors_q;
        j["correspondences"] = s.correspondences.fine.size();
        steps.push_back(std::move(j));
    }
    nlohmann::json out = {{"steps", steps}, {"final", to_json(t.final_transform())}};
    out["initial"] = t.initial ? to_json(*t.initial) : nlohmann::json(nullptr);
    if (t.failure) out["failure"] = {{"step", t.failed_step}, {"message", *t.failure}};
    return out;
}

}  // namespace amr
