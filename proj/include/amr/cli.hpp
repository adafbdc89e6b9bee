#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "amr/data.hpp"
#include "amr/degradation.hpp"
#include "amr/metrics.hpp"
#include "amr/refine.hpp"
#include "amr/training.hpp"

namespace amr {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitIo = 2, kExitDivergence = 3, kExitEstimation = 4 };

struct GenConfig {
    std::size_t pairs = 10;
    std::vector<std::pair<double, double>> overlap_bins{{0.10, 0.20}, {0.20, 0.30}};
    SceneSpec scene;
    double prior_rot_err = 0.35;    // radians
    double prior_trans_err = 0.3;   // meters
    int attempts = 20;              // scenes tried per pair to land inside its bin

    void validate() const {
        if (pairs < 1) throw Error("gen config: pairs must be >= 1");
        if (overlap_bins.empty()) throw Error("gen config: need at least one overlap bin");
        for (const auto& [lo, hi] : overlap_bins)
            if (!(lo < hi) || lo < 0.05 || hi > 1.0) throw Error("gen config: overlap bins must satisfy 0.05 <= lo < hi <= 1");
        if (prior_rot_err < 0 || prior_trans_err < 0) throw Error("gen config: prior errors must be non-negative");
        if (attempts < 1) throw Error("gen config: attempts must be >= 1");
        scene.validate();
    }
};

struct EvalConfig {
    std::vector<double> overlap_edges{0.15, 0.20, 0.25, 0.30};
    double rmse_threshold = kDefaultRmseThreshold;
    double ir_threshold = kDefaultIrThreshold;
    double ir_radius = kIndoorIrRadius;
    double rre_threshold_deg = 5.0;
    double rte_threshold = kDefaultRteThreshold;
    std::size_t top_n = 0;  // correspondences kept for IR, by confidence; 0 keeps all

    void validate() const {
        for (std::size_t i = 1; i < overlap_edges.size(); ++i)
            if (!(overlap_edges[i - 1] < overlap_edges[i])) throw Error("eval config: overlap edges must increase");
        if (!(rmse_threshold > 0) || !(ir_radius > 0) || !(rre_threshold_deg > 0) || !(rte_threshold > 0) || ir_threshold < 0)
            throw Error("eval config: thresholds must be positive");
    }
};

/// Every module config under one JSON document.
struct RunConfig {
    PipelineConfig pipeline;
    TrainConfig train;
    GenConfig gen;
    EvalConfig eval;

    void validate() const {
        pipeline.validate();
        train.schedule.validate();
        if (train.schedule.K != pipeline.steps()) throw Error("run config: train.schedule.K must equal pipeline.K");
        gen.validate();
        eval.validate();
    }
};

inline nlohmann::json to_json(const GenConfig& c) {
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& [lo, hi] : c.overlap_bins) bins.push_back({lo, hi});
    return {{"pairs", c.pairs},           {"overlap_bins", bins},
            {"scene", to_json(c.scene)},  {"prior_rot_err", c.prior_rot_err},
            {"prior_trans_err", c.prior_trans_err}, {"attempts", c.attempts}};
}

inline void apply_json(GenConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("gen config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "pairs") c.pairs = v.get<std::size_t>();
        else if (key == "overlap_bins") {
            c.overlap_bins.clear();
            for (const auto& b : v) {
                if (!b.is_array() || b.size() != 2) throw Error("gen config: each overlap bin is [lo, hi]");
                c.overlap_bins.emplace_back(b[0].get<double>(), b[1].get<double>());
            }
        } else if (key == "scene") apply_json(c.scene, v);
        else if (key == "prior_rot_err") c.prior_rot_err = v.get<double>();
        else if (key == "prior_trans_err") c.prior_trans_err = v.get<double>();
        else if (key == "attempts") c.attempts = v.get<int>();
        else throw Error("gen config: unknown key \"" + key + "\"");
    }
}

inline nlohmann::json to_json(const EvalConfig& c) {
    return {{"overlap_edges", c.overlap_edges},   {"rmse_threshold", c.rmse_threshold},
            {"ir_threshold", c.ir_threshold},     {"ir_radius", c.ir_radius},
            {"rre_threshold_deg", c.rre_threshold_deg}, {"rte_threshold", c.rte_threshold},
            {"top_n", c.top_n}};
}

inline void apply_json(EvalConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("eval config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "overlap_edges") c.overlap_edges = v.get<std::vector<double>>();
        else if (key == "rmse_threshold") c.rmse_threshold = v.get<double>();
        else if (key == "ir_threshold") c.ir_threshold = v.get<double>();
        else if (key == "ir_radius") c.ir_radius = v.get<double>();
        else if (key == "rre_threshold_deg") c.rre_threshold_deg = v.get<double>();
        else if (key == "rte_threshold") c.rte_threshold = v.get<double>();
        else if (key == "top_n") c.top_n = v.get<std::size_t>();
        else throw Error("eval config: unknown key \"" + key + "\"");
    }
}

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"pipeline", to_json(c.pipeline)}, {"train", to_json(c.train)}, {"gen", to_json(c.gen)}, {"eval", to_json(c.eval)}};
}

inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("run config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "pipeline") apply_json(c.pipeline, v);
        else if (key == "train") apply_json(c.train, v);
        else if (key == "gen") apply_json(c.gen, v);
        else if (key == "eval") apply_json(c.eval, v);
        else throw Error("run config: unknown key \"" + key + "\"");
    }
}

namespace cli {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << bytes;
    if (!out) throw IoError("cannot write " + path);
}

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(what + ": " + e.what());
    }
}

/// Inline JSON when the argument starts with '{', otherwise a file holding JSON.
inline nlohmann::json json_arg(const std::string& arg, const std::string& what) {
    if (!arg.empty() && arg.front() == '{') return parse_json(arg, what);
    return parse_json(read_file(arg), what);
}

inline RunConfig load_run_config(const std::string& path) {
    RunConfig c;
    if (!path.empty()) apply_json(c, parse_json(read_file(path), "config " + path));
    return c;
}

inline std::string sidecar_path(const std::string& model) { return model + ".json"; }

inline void save_model(const RefinementPipeline& pipe, const TrainConfig& tc, const std::string& path) {
    weights_io::save(pipe.params, path);
    nlohmann::json side = {{"pipeline", to_json(pipe.config)}, {"schedule", to_json(tc.schedule)}};
    write_file(sidecar_path(path), side.dump(2) + "\n");
}

/// Rebuilds a pipeline from a checkpoint and the configuration stored next to it.
inline RefinementPipeline load_model(const std::string& path) {
    const auto side = parse_json(read_file(sidecar_path(path)), "model sidecar");
    if (!side.is_object() || !side.contains("pipeline")) throw IoError("model sidecar lacks a pipeline section");
    PipelineConfig cfg;
    apply_json(cfg, side.at("pipeline"));
    RefinementPipeline pipe{cfg, weights_io::load(path)};
    const auto expect = RefinementPipeline::create(cfg, 0);
    if (expect.params.size() != pipe.params.size()) throw IoError("checkpoint does not match its configuration");
    for (const auto& [name, p] : expect.params) {
        if (!pipe.params.contains(name) || pipe.params.at(name).value.shape != p.value.shape)
            throw IoError("checkpoint does not match its configuration: " + name);
    }
    return pipe;
}

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w)
        threads.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::string pair_name(std::size_t i, const char* side) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "pair_%04zu_%s.ply", i, side);
    return buf;
}

}  // namespace cli

struct GenOptions {
    std::string out_dir;
    std::uint64_t seed = 0;
    int jobs = 1;
};

/// Writes `pairs` PLY pairs (cycling through the overlap bins) and `manifest.json` into `out_dir`.
inline std::string cmd_gen(const RunConfig& rc, const GenOptions& opt) {
    const GenConfig& gc = rc.gen;
    std::filesystem::create_directories(opt.out_dir);
    std::mt19937_64 rng(opt.seed);
    std::vector<std::uint64_t> seeds(gc.pairs);
    for (auto& s : seeds) s = rng();

    std::vector<PairRecord> records(gc.pairs);
    cli::parallel_for(gc.pairs, opt.jobs, [&](std::size_t i) {
        const auto [lo, hi] = gc.overlap_bins[i % gc.overlap_bins.size()];
        std::mt19937_64 local(seeds[i]);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::optional<GeneratedPair> best;
        for (int attempt = 0; attempt < gc.attempts; ++attempt) {
            SceneSpec spec = gc.scene;
            spec.seed = local();
            spec.target_overlap = std::max(0.05, lo + (hi - lo) * (0.25 + 0.5 * unit(local)));
            try {
                GeneratedPair g = generate_pair(spec);
                const bool inside = g.record.overlap >= lo && g.record.overlap < hi;
                best = std::move(g);
                if (inside) break;
            } catch (const Error&) {
            }
        }
        if (!best) throw Error("gen: no feasible scene for pair " + std::to_string(i));
        PairRecord rec = best->record;
        rec.source = cli::pair_name(i, "source");
        rec.target = cli::pair_name(i, "target");
        rec.prior = synth_prior(rec.gt, gc.prior_rot_err, gc.prior_trans_err, local());
        save_ply((std::filesystem::path(opt.out_dir) / rec.source).string(), best->source);
        save_ply((std::filesystem::path(opt.out_dir) / rec.target).string(), best->target);
        records[i] = rec;
    });
    const std::string manifest = (std::filesystem::path(opt.out_dir) / "manifest.json").string();
    save_manifest(manifest, records);
    return manifest;
}

/// Loads the clouds of a manifest and derives the training labels of every pair.
inline std::vector<TrainingPair> load_training_pairs(const std::vector<PairRecord>& records, const PipelineConfig& pc,
                                                     double overlap_radius, int jobs = 1) {
    std::vector<TrainingPair> data(records.size());
    cli::parallel_for(records.size(), jobs, [&](std::size_t i) {
        const auto& r = records[i];
        data[i] = make_training_pair(std::filesystem::path(r.source).filename().string(), pc, load_ply(r.source),
                                     load_ply(r.target), r.gt, r.prior, overlap_radius);
    });
    return data;
}

struct TrainOptions {
    std::string manifest;
    std::string out;
    std::string log;  // defaults to <out>.log.jsonl
    std::uint64_t seed = 0;
    int jobs = 1;
};

inline TrainResult cmd_train(RunConfig rc, const TrainOptions& opt) {
    rc.train.seed = opt.seed;
    const auto records = load_manifest(opt.manifest);
    if (records.empty()) throw IoError("manifest " + opt.manifest + " is empty");
    const auto data = load_training_pairs(records, rc.pipeline, rc.train.overlap_radius, opt.jobs);
    const std::string log_path = opt.log.empty() ? opt.out + ".log.jsonl" : opt.log;
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot write " + log_path);
    auto res = train(data, rc.train, rc.pipeline, [&](const LossRecord& r) { log << to_json(r).dump() << "\n"; });
    log.flush();
    if (!log) throw IoError("cannot write " + log_path);
    weights_io::round_to_f32(res.pipeline.params);
    cli::save_model(res.pipeline, rc.train, opt.out);
    return res;
}

/// Parses `--prior`: "identity", "none", a transform JSON object, or a file holding one.
inline std::optional<RigidTransform> parse_prior(const std::string& arg) {
    if (arg.empty() || arg == "identity") return RigidTransform::identity();
    if (arg == "none") return std::nullopt;
    return transform_from_json(cli::json_arg(arg, "prior"));
}

struct RegisterOptions {
    std::string model;
    std::string source;
    std::string target;
    std::string prior = "identity";
    std::optional<int> steps;
    std::string dump_corr;
};

inline Trajectory cmd_register(const RegisterOptions& opt) {
    auto pipe = cli::load_model(opt.model);
    const auto x0 = parse_prior(opt.prior);
    const auto ctx = prepare_pair(pipe.config, load_ply(opt.source), load_ply(opt.target));
    Trajectory t = run_pipeline(pipe, ctx, x0, opt.steps);
    if (!opt.dump_corr.empty()) {
        std::ofstream out(opt.dump_corr);
        if (!out) throw IoError("cannot write " + opt.dump_corr);
        if (!t.steps.empty())
            for (const auto& m : t.steps.back().correspondences.fine) {
                const Vec3& p = ctx.hp.fine.points[m.p];
                const Vec3& q = ctx.hq.fine.points[m.q];
                out << nlohmann::json{{"pi", m.p}, {"qj", m.q}, {"conf", m.confidence},
                                      {"p", {p.x(), p.y(), p.z()}}, {"q", {q.x(), q.y(), q.z()}}}
                           .dump()
                    << "\n";
            }
        if (!out) throw IoError("cannot write " + opt.dump_corr);
    }
    return t;
}

struct EvalOptions {
    std::string model;
    std::string manifest;
    std::string report;
    std::optional<int> steps;
    int jobs = 1;
};

/// Metrics of one trajectory step against gt.
inline PairEvaluation evaluate_step(const RigidTransform& x, const CorrespondenceSet* corr, const PairContext& ctx,
                                    const PairRecord& rec, const std::vector<Vec3>& eval_points, const EvalConfig& ec) {
    PairEvaluation e;
    e.rmse = alignment_rmse(x, rec.gt, eval_points);
    e.rre = rotation_error(x.rotation, rec.gt.rotation);
    e.rte = translation_error(x.translation, rec.gt.translation);
    e.overlap = rec.overlap;
    if (corr) {
        const auto fine = ec.top_n ? top_confident(corr->fine, ec.top_n) : corr->fine;
        std::vector<std::pair<Vec3, Vec3>> pairs;
        for (const auto& m : fine) pairs.emplace_back(ctx.hp.fine.points[m.p], ctx.hq.fine.points[m.q]);
        e.correspondences = pairs.size();
        e.inlier_ratio = inlier_ratio(pairs, rec.gt, ec.ir_radius);
    }
    return e;
}

inline nlohmann::json summarize(const std::vector<PairEvaluation>& ev, const EvalConfig& ec) {
    double rmse = 0, ir = 0;
    for (const auto& e : ev) {
        rmse += e.rmse;
        ir += e.inlier_ratio;
    }
    const double n = static_cast<double>(ev.size());
    return {{"RR", registration_recall(ev, ec.rmse_threshold)},
            {"IR", ir / n},
            {"FMR", fmr(ev, ec.ir_threshold)},
            {"pose_recall", pose_recall(ev, ec.rre_threshold_deg * kPi / 180.0, ec.rte_threshold)},
            {"mean_rmse", rmse / n}};
}

inline nlohmann::json cmd_eval(const RunConfig& rc, const EvalOptions& opt) {
    rc.eval.validate();
    const auto records = load_manifest(opt.manifest);
    if (records.empty()) throw IoError("manifest " + opt.manifest + " is empty");
    const auto base = cli::load_model(opt.model);
    const int steps = opt.steps.value_or(base.config.steps());
    if (steps < 1 || steps > base.config.steps()) throw Error("eval: --steps out of range");

    const std::size_t n = records.size();
    std::vector<std::vector<PairEvaluation>> per_step(static_cast<std::size_t>(steps), std::vector<PairEvaluation>(n));
    std::vector<PairEvaluation> initial(n);
    std::vector<nlohmann::json> rows(n);
    cli::parallel_for(n, opt.jobs, [&](std::size_t i) {
        RefinementPipeline pipe = base;
        const auto& rec = records[i];
        const auto ctx = prepare_pair(pipe.config, load_ply(rec.source), load_ply(rec.target));
        const auto sample = gt_overlap_sample(ctx.hp, ctx.hq, rec.gt, pipe.config.overlap_radius);
        const auto x0 = rec.prior.value_or(RigidTransform::identity());
        const Trajectory t = run_pipeline(pipe, ctx, x0, steps);
        initial[i] = evaluate_step(x0, nullptr, ctx, rec, sample.points, rc.eval);
        nlohmann::json row = {{"source", rec.source}, {"target", rec.target}, {"overlap", rec.overlap},
                              {"initial_rmse", initial[i].rmse}};
        nlohmann::json srows = nlohmann::json::array();
        for (int k = 0; k < steps; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            // a failed step keeps the last available estimate
            const bool ran = ku < t.steps.size();
            const RigidTransform x = ran ? t.steps[ku].transform : t.final_transform();
            per_step[ku][i] = evaluate_step(x, ran ? &t.steps[ku].correspondences : nullptr, ctx, rec, sample.points, rc.eval);
            nlohmann::json s = to_json(per_step[ku][i]);
            s["step"] = k + 1;
            s["ran"] = ran;
            srows.push_back(std::move(s));
        }
        row["steps"] = std::move(srows);
        if (t.failure) row["failure"] = {{"step", t.failed_step}, {"message", *t.failure}};
        rows[i] = std::move(row);
    });

    const auto& final_ev = per_step.back();
    nlohmann::json report = summarize(final_ev, rc.eval);
    report["pairs"] = n;
    report["steps"] = steps;
    report["config"] = to_json(rc.eval);
    report["initial"] = summarize(initial, rc.eval);
    nlohmann::json ps = nlohmann::json::array();
    for (int k = 0; k < steps; ++k) {
        nlohmann::json s = summarize(per_step[static_cast<std::size_t>(k)], rc.eval);
        s["step"] = k + 1;
        ps.push_back(std::move(s));
    }
    report["per_step"] = std::move(ps);
    nlohmann::json bins = nlohmann::json::array();
    for (const auto& b : recall_by_overlap(final_ev, rc.eval.overlap_edges, rc.eval.rmse_threshold)) {
        nlohmann::json jb = {{"lo", std::isinf(b.lo) ? nlohmann::json(nullptr) : nlohmann::json(b.lo)},
                             {"hi", std::isinf(b.hi) ? nlohmann::json(nullptr) : nlohmann::json(b.hi)},
                             {"count", b.count}};
        jb["recall"] = b.recall ? nlohmann::json(*b.recall) : nlohmann::json(nullptr);
        bins.push_back(std::move(jb));
    }
    report["overlap_bins"] = std::move(bins);
    report["rows"] = std::move(rows);
    if (!opt.report.empty()) cli::write_file(opt.report, report.dump(2) + "\n");
    return report;
}

/// One row per printed level: tau, group, rotation and translation error to gt, then the transform.
inline void cmd_degrade_inspect(const RigidTransform& prior, const RigidTransform& gt, const DegradationSchedule& s,
                                int every, std::ostream& out) {
    s.validate();
    if (every < 1) throw Error("degrade-inspect: --every must be >= 1");
    out << "tau\tgroup\trot_err\ttrans_err\tqw\tqx\tqy\tqz\ttx\tty\ttz\n";
    char buf[512];
    for (int tau = 0; tau <= s.T; ++tau) {
        if (tau % every != 0 && tau != s.T) continue;
        const auto x = degrade(prior, gt, tau, s.T);
        const auto& q = x.rotation;
        const auto& t = x.translation;
        std::snprintf(buf, sizeof buf, "%d\t%d\t%.12g\t%.12g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\n", tau,
                      tau == 0 ? 0 : group_index(tau, s.T, s.K), rotation_error(q, gt.rotation),
                      translation_error(t, gt.translation), q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z());
        out << buf;
    }
}

/// Entry point of the `amr` binary.
inline int run_cli(int argc, char** argv) {
    CLI::App app{"Anchor-based multi-step point cloud registration"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "Run config JSON (pipeline, train, gen, eval sections)");

    GenOptions gen_opt;
    std::optional<std::size_t> gen_pairs;
    auto* gen = app.add_subcommand("gen", "Generate synthetic pairs and a manifest");
    gen->add_option("--out", gen_opt.out_dir, "Output directory")->required();
    gen->add_option("--seed", gen_opt.seed, "Generator seed")->required();
    gen->add_option("--pairs", gen_pairs, "Number of pairs");
    gen->add_option("--jobs", gen_opt.jobs, "Worker threads");

    TrainOptions train_opt;
    std::optional<int> train_epochs;
    auto* tr = app.add_subcommand("train", "Train the multi-step model");
    tr->add_option("--manifest", train_opt.manifest, "Training manifest")->required();
    tr->add_option("--out", train_opt.out, "Checkpoint path")->required();
    tr->add_option("--seed", train_opt.seed, "Training seed")->required();
    tr->add_option("--log", train_opt.log, "Loss log (JSON lines)");
    tr->add_option("--epochs", train_epochs, "Epochs");
    tr->add_option("--jobs", train_opt.jobs, "Worker threads for data preparation");

    RegisterOptions reg_opt;
    auto* reg = app.add_subcommand("register", "Register a source cloud to a target cloud");
    reg->add_option("--model", reg_opt.model, "Checkpoint path")->required();
    reg->add_option("--source", reg_opt.source, "Source PLY")->required();
    reg->add_option("--target", reg_opt.target, "Target PLY")->required();
    reg->add_option("--prior", reg_opt.prior, "identity (default), none, transform JSON, or a JSON file");
    reg->add_option("--steps", reg_opt.steps, "Number of refinement steps to run");
    reg->add_option("--dump-corr", reg_opt.dump_corr, "Write the last step's fine correspondences as JSON lines");

    EvalOptions eval_opt;
    auto* ev = app.add_subcommand("eval", "Evaluate a model on a manifest");
    ev->add_option("--model", eval_opt.model, "Checkpoint path")->required();
    ev->add_option("--manifest", eval_opt.manifest, "Manifest")->required();
    ev->add_option("--report", eval_opt.report, "Report JSON path")->required();
    ev->add_option("--steps", eval_opt.steps, "Number of refinement steps to run");
    ev->add_option("--jobs", eval_opt.jobs, "Worker threads");

    std::string di_prior, di_gt;
    int di_T = 1000, di_K = 5, di_every = 100;
    auto* di = app.add_subcommand("degrade-inspect", "Print the degradation path from a prior to gt");
    di->add_option("--prior", di_prior, "Prior transform JSON or file")->required();
    di->add_option("--gt", di_gt, "Ground-truth transform JSON or file")->required();
    di->add_option("--T", di_T, "Accuracy levels");
    di->add_option("--K", di_K, "Groups");
    di->add_option("--every", di_every, "Print every n-th level");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    RunConfig rc;
    try {
        rc = cli::load_run_config(config_path);
        if (gen_pairs) rc.gen.pairs = *gen_pairs;
        if (train_epochs) rc.train.epochs = *train_epochs;
        rc.validate();
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (*gen) {
            std::cout << cmd_gen(rc, gen_opt) << "\n";
        } else if (*tr) {
            cmd_train(rc, train_opt);
            std::cout << train_opt.out << "\n";
        } else if (*reg) {
            const Trajectory t = cmd_register(reg_opt);
            std::cout << to_json(t).dump(2) << "\n";
            if (t.failure) {
                std::cerr << "estimation failed: " << *t.failure << "\n";
                return kExitEstimation;
            }
        } else if (*ev) {
            const auto report = cmd_eval(rc, eval_opt);
            std::cout << nlohmann::json{{"RR", report["RR"]}, {"IR", report["IR"]}, {"FMR", report["FMR"]}}.dump() << "\n";
        } else if (*di) {
            cmd_degrade_inspect(transform_from_json(cli::json_arg(di_prior, "prior")),
                                transform_from_json(cli::json_arg(di_gt, "gt")), {di_T, di_K}, di_every, std::cout);
        }
    } catch (const TrainingDivergence& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const EstimationError& e) {
        std::cerr << "estimation failed: " << e.what() << "\n";
        return kExitEstimation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitOk;
}

}  // namespace amr
