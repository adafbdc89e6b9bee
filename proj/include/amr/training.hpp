#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "amr/degradation.hpp"
#include "amr/refine.hpp"

namespace amr {

struct CircleLossParams {
    double pos_margin = 0.1;  // delta_p
    double neg_margin = 1.4;  // delta_n
    double log_scale = 24.0;  // gamma
};

struct TrainConfig {
    DegradationSchedule schedule;
    int epochs = 30;
    int batch_size = 1;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double grad_clip = 10.0;  // global gradient-norm clip per update; 0 disables
    std::optional<std::uint64_t> seed;
    CircleLossParams circle;
    double overlap_radius = 0.05;
    double match_temperature = 0.1;
    std::size_t max_patch_pairs = 32;
    std::size_t max_patch_points = 64;

    void validate() const {
        schedule.validate();
        if (!seed) throw Error("train config: seed is required");
        if (epochs < 1 || batch_size < 1) throw Error("train config: epochs and batch size must be positive");
        if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0 || grad_clip < 0.0)
            throw Error("train config: bad optimizer settings");
        if (!(circle.log_scale > 0.0) || !(overlap_radius > 0.0) || !(match_temperature > 0.0))
            throw Error("train config: scales must be positive");
        if (max_patch_pairs < 1 || max_patch_points < 1) throw Error("train config: patch limits must be positive");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j = {{"schedule", to_json(c.schedule)}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
                        {"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"grad_clip", c.grad_clip},
                        {"pos_margin", c.circle.pos_margin}, {"neg_margin", c.circle.neg_margin},
                        {"log_scale", c.circle.log_scale}, {"overlap_radius", c.overlap_radius},
                        {"match_temperature", c.match_temperature}, {"max_patch_pairs", c.max_patch_pairs},
                        {"max_patch_points", c.max_patch_points}};
    if (c.seed) j["seed"] = *c.seed;
    return j;
}

inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw Error("train config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "schedule") c.schedule = schedule_from_json(v);
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "batch_size") c.batch_size = v.get<int>();
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "momentum") c.momentum = v.get<double>();
        else if (key == "grad_clip") c.grad_clip = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "pos_margin") c.circle.pos_margin = v.get<double>();
        else if (key == "neg_margin") c.circle.neg_margin = v.get<double>();
        else if (key == "log_scale") c.circle.log_scale = v.get<double>();
        else if (key == "overlap_radius") c.overlap_radius = v.get<double>();
        else if (key == "match_temperature") c.match_temperature = v.get<double>();
        else if (key == "max_patch_pairs") c.max_patch_pairs = v.get<std::size_t>();
        else if (key == "max_patch_points") c.max_patch_points = v.get<std::size_t>();
        else throw Error("train config: unknown key \"" + key + "\"");
    }
}

namespace detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// log-sum-exp of `v` and its softmax weights.
inline double logsumexp(const std::vector<double>& v, std::vector<double>& soft) {
    const double mx = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    soft.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) s += (soft[i] = std::exp(v[i] - mx));
    for (auto& x : soft) x /= s;
    return mx + std::log(s);
}

}  // namespace detail

/// Overlap-aware circle loss over superpoint features. Patch pairs with gt overlap > 0 are
/// positives weighted by their overlap fraction; pairs with zero overlap are negatives.
/// Rows (and columns) lacking either a positive or a negative are skipped, and the row and
/// column means are averaged over the sides that have terms. Without any positive the loss
/// is a constant 0 and `*had_positives` is cleared.
inline Var overlap_circle_loss(Var feats_p, Var feats_q, const Eigen::MatrixXd& overlaps, const CircleLossParams& prm,
                               bool* had_positives = nullptr) {
    Graph& g = *feats_p.graph;
    ops::require(overlaps.rows() == static_cast<Eigen::Index>(feats_p.value().rows()) &&
                     overlaps.cols() == static_cast<Eigen::Index>(feats_q.value().rows()),
                 "overlap_circle_loss overlap matrix");
    const bool any_pos = (overlaps.array() > 0.0).any();
    if (had_positives) *had_positives = any_pos;
    if (!any_pos) return g.input(Tensor({1}, {0.0}));

    const Var np = ops::l2_normalize_rows(feats_p);
    const Var nq = ops::l2_normalize_rows(feats_q);
    const Tensor& P = np.value();
    const Tensor& Q = nq.value();
    const auto rows = static_cast<Eigen::Index>(P.rows()), cols = static_cast<Eigen::Index>(Q.rows());
    const std::size_t width = P.cols();
    Eigen::MatrixXd dist(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            double c = 0.0;
            for (std::size_t k = 0; k < width; ++k) c += P(static_cast<std::size_t>(i), k) * Q(static_cast<std::size_t>(j), k);
            dist(i, j) = std::sqrt(std::max(2.0 - 2.0 * c, 0.0) + 1e-12);
        }
    const double gamma = prm.log_scale;
    // per-entry logits and their derivative with respect to the distance
    Eigen::MatrixXd logit(rows, cols), dlogit(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            const double d = dist(i, j);
            if (overlaps(i, j) > 0.0) {
                const double r = std::max(d - prm.pos_margin, 0.0);
                logit(i, j) = gamma * overlaps(i, j) * r * r;
                dlogit(i, j) = 2.0 * gamma * overlaps(i, j) * r;
            } else {
                const double r = std::max(prm.neg_margin - d, 0.0);
                logit(i, j) = gamma * r * r;
                dlogit(i, j) = -2.0 * gamma * r;
            }
        }

    Eigen::MatrixXd gdist = Eigen::MatrixXd::Zero(rows, cols);
    double total = 0.0;
    // side 0 walks rows of the matrix, side 1 walks columns
    struct Term {
        Eigen::Index o;
        std::vector<Eigen::Index> pos, neg;
        std::vector<double> sp, sn;
        double s;
    };
    std::vector<Term> side_terms[2];
    for (int side = 0; side < 2; ++side) {
        const Eigen::Index outer = side == 0 ? rows : cols, inner = side == 0 ? cols : rows;
        auto& terms = side_terms[side];
        for (Eigen::Index o = 0; o < outer; ++o) {
            Term t{o, {}, {}, {}, {}, 0.0};
            std::vector<double> vp, vn;
            for (Eigen::Index n = 0; n < inner; ++n) {
                const Eigen::Index i = side == 0 ? o : n, j = side == 0 ? n : o;
                if (overlaps(i, j) > 0.0) {
                    t.pos.push_back(n);
                    vp.push_back(logit(i, j));
                } else {
                    t.neg.push_back(n);
                    vn.push_back(logit(i, j));
                }
            }
            if (t.pos.empty() || t.neg.empty()) continue;
            t.s = detail::logsumexp(vp, t.sp) + detail::logsumexp(vn, t.sn);
            terms.push_back(std::move(t));
        }
    }
    const int sides = !side_terms[0].empty() + !side_terms[1].empty();
    for (int side = 0; side < 2; ++side) {
        const auto& terms = side_terms[side];
        if (terms.empty()) continue;
        const double inv = 1.0 / (sides * static_cast<double>(terms.size()));
        for (const auto& t : terms) {
            total += inv * detail::softplus(t.s) / gamma;
            const double gs = inv * detail::sigmoid(t.s) / gamma;
            auto at = [&](Eigen::Index n) -> std::pair<Eigen::Index, Eigen::Index> {
                return side == 0 ? std::pair{t.o, n} : std::pair{n, t.o};
            };
            for (std::size_t a = 0; a < t.pos.size(); ++a) {
                const auto [i, j] = at(t.pos[a]);
                gdist(i, j) += gs * t.sp[a] * dlogit(i, j);
            }
            for (std::size_t a = 0; a < t.neg.size(); ++a) {
                const auto [i, j] = at(t.neg[a]);
                gdist(i, j) += gs * t.sn[a] * dlogit(i, j);
            }
        }
    }
    // d dist / d cos = -1 / dist
    Eigen::MatrixXd gcos = -gdist.cwiseQuotient(dist);
    const std::size_t ip = np.id, iq = nq.id;
    return g.push(Tensor({1}, {total}), {ip, iq}, [ip, iq, gcos = std::move(gcos), width](Graph& gr, std::size_t self) {
        const double G = gr.grad_ref(self).data[0];
        const Tensor& P = gr.value_of(ip);
        const Tensor& Q = gr.value_of(iq);
        if (gr.wants_grad(ip)) {
            Tensor& GP = gr.grad_ref(ip);
            for (Eigen::Index i = 0; i < gcos.rows(); ++i)
                for (Eigen::Index j = 0; j < gcos.cols(); ++j) {
                    const double c = G * gcos(i, j);
                    if (c == 0.0) continue;
                    for (std::size_t k = 0; k < width; ++k)
                        GP(static_cast<std::size_t>(i), k) += c * Q(static_cast<std::size_t>(j), k);
                }
        }
        if (gr.wants_grad(iq)) {
            Tensor& GQ = gr.grad_ref(iq);
            for (Eigen::Index i = 0; i < gcos.rows(); ++i)
                for (Eigen::Index j = 0; j < gcos.cols(); ++j) {
                    const double c = G * gcos(i, j);
                    if (c == 0.0) continue;
                    for (std::size_t k = 0; k < width; ++k)
                        GQ(static_cast<std::size_t>(j), k) += c * P(static_cast<std::size_t>(i), k);
                }
        }
    });
}

/// Match scores of one patch pair with row/column labels. A row label equal to the column
/// count (or a column label equal to the row count) selects the slack bin.
struct PatchScores {
    Var logits;  // [m, n]
    std::vector<std::size_t> row_labels;
    std::vector<std::size_t> col_labels;
};

/// Mean negative log-likelihood of the labeled entries under row-wise and column-wise
/// softmax distributions, each extended by a shared slack logit.
inline Var point_matching_loss(const std::vector<PatchScores>& patches, Var slack) {
    Graph& g = *slack.graph;
    std::size_t labeled = 0;
    for (const auto& p : patches) labeled += p.row_labels.size() + p.col_labels.size();
    if (labeled == 0) return g.input(Tensor({1}, {0.0}));

    const double s0 = slack.value().data[0];
    const double inv = 1.0 / static_cast<double>(labeled);
    double total = 0.0;
    std::vector<Tensor> grads;
    double gslack = 0.0;
    std::vector<std::size_t> parents{slack.id};
    for (const auto& p : patches) {
        const Tensor& L = p.logits.value();
        const std::size_t m = L.rows(), n = L.cols();
        ops::require(p.row_labels.size() == m && p.col_labels.size() == n, "point_matching_loss labels");
        Tensor gl = Tensor::matrix(m, n);
        std::vector<double> v, soft;
        for (std::size_t i = 0; i < m; ++i) {
            v.assign(&L.data[i * n], &L.data[i * n] + n);
            v.push_back(s0);
            const double lse = detail::logsumexp(v, soft);
            const std::size_t y = p.row_labels[i];
            ops::require(y <= n, "point_matching_loss row label");
            total += inv * (lse - v[y]);
            for (std::size_t j = 0; j < n; ++j) gl(i, j) += inv * (soft[j] - (j == y ? 1.0 : 0.0));
            gslack += inv * (soft[n] - (y == n ? 1.0 : 0.0));
        }
        for (std::size_t j = 0; j < n; ++j) {
            v.resize(m);
            for (std::size_t i = 0; i < m; ++i) v[i] = L(i, j);
            v.push_back(s0);
            const double lse = detail::logsumexp(v, soft);
            const std::size_t y = p.col_labels[j];
            ops::require(y <= m, "point_matching_loss column label");
            total += inv * (lse - v[y]);
            for (std::size_t i = 0; i < m; ++i) gl(i, j) += inv * (soft[i] - (i == y ? 1.0 : 0.0));
            gslack += inv * (soft[m] - (y == m ? 1.0 : 0.0));
        }
        grads.push_back(std::move(gl));
        parents.push_back(p.logits.id);
    }
    const std::size_t is = slack.id;
    return g.push(Tensor({1}, {total}), parents,
                  [is, parents, grads = std::move(grads), gslack](Graph& gr, std::size_t self) {
                      const double G = gr.grad_ref(self).data[0];
                      if (gr.wants_grad(is)) gr.grad_ref(is).data[0] += G * gslack;
                      for (std::size_t k = 0; k < grads.size(); ++k) {
                          const std::size_t id = parents[k + 1];
                          if (!gr.wants_grad(id)) continue;
                          Tensor& GL = gr.grad_ref(id);
                          for (std::size_t e = 0; e < GL.size(); ++e) GL.data[e] += G * grads[k].data[e];
                      }
                  });
}

/// Ground-truth supervision of a pair; independent of the sampled prior.
struct PairLabels {
    Eigen::MatrixXd patch_overlaps;                           // [S_p, S_q] under gt
    std::vector<std::pair<std::size_t, std::size_t>> fine;    // mutual nearest fine pairs within radius
};

/// Mutual nearest neighbors between gt(P fine) and Q fine within `radius`.
inline std::vector<std::pair<std::size_t, std::size_t>> mutual_nn_pairs(const HierarchicalCloud& hp,
                                                                        const HierarchicalCloud& hq,
                                                                        const RigidTransform& gt, double radius) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (hp.fine.empty() || hq.fine.empty()) return out;
    const std::vector<Vec3> moved = gt.apply(hp.fine.points);
    const GridIndex iq(hq.fine.points, radius), ip(moved, radius);
    for (std::size_t i = 0; i < moved.size(); ++i) {
        const auto j = *iq.nearest(moved[i]);
        if ((hq.fine.points[j] - moved[i]).norm() > radius) continue;
        if (*ip.nearest(hq.fine.points[j]) == i) out.emplace_back(i, j);
    }
    return out;
}

inline PairLabels make_labels(const PairContext& ctx, const RigidTransform& gt, double radius) {
    return {patch_overlap_matrix(ctx.hp, ctx.hq, gt, radius), mutual_nn_pairs(ctx.hp, ctx.hq, gt, radius)};
}

struct TrainingPair {
    std::string id;
    PairContext ctx;
    RigidTransform gt;
    std::optional<RigidTransform> prior;  // identity when absent
    PairLabels labels;
};

inline TrainingPair make_training_pair(std::string id, const PipelineConfig& pc, const PointCloud& p, const PointCloud& q,
                                       const RigidTransform& gt, const std::optional<RigidTransform>& prior,
                                       double overlap_radius) {
    TrainingPair tp{std::move(id), prepare_pair(pc, p, q), gt, prior, {}};
    tp.labels = make_labels(tp.ctx, gt, overlap_radius);
    return tp;
}

struct TrainingSample {
    PriorSample prior;
    RigidTransform gt;
    const PairLabels* labels = nullptr;
};

/// Draws a group uniformly, tau uniformly inside it, and degrades the pair's prior toward gt.
inline TrainingSample make_training_sample(const TrainingPair& pair, const DegradationSchedule& schedule,
                                           std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> group_dist(1, schedule.K);
    const int group = group_dist(rng);
    const int tau = sample_tau(rng(), group, schedule);
    if (!pair.prior) std::cerr << "warning: pair " << pair.id << " has no prior; using identity\n";
    const RigidTransform base = pair.prior.value_or(RigidTransform::identity());
    return {make_prior_sample(base, pair.gt, tau, schedule), pair.gt, &pair.labels};
}

struct SampleLoss {
    double loss_oc = 0.0;
    double loss_p = 0.0;
    double total() const { return loss_oc + loss_p; }
};

namespace detail {

/// Builds the loss graph of one sample; returns the scalar loss node.
inline Var sample_loss_graph(Graph& g, RefinementPipeline& pipe, const TrainingPair& pair, const TrainingSample& s,
                             const TrainConfig& tc, SampleLoss* parts) {
    const auto& ctx = pair.ctx;
    const AnchorPartition part = anchor_split(ctx.hp, ctx.hq, s.prior.transform, tc.overlap_radius,
                                              pipe.config.anchor_threshold);
    const Var sp_desc = g.input(ctx.dp.super), sq_desc = g.input(ctx.dq.super);

    // fine features only for the points that enter the matching loss
    const auto& ov = s.labels->patch_overlaps;
    std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
    for (Eigen::Index i = 0; i < ov.rows(); ++i)
        for (Eigen::Index j = 0; j < ov.cols(); ++j)
            if (ov(i, j) > 0.0) cand.emplace_back(-ov(i, j), static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    std::sort(cand.begin(), cand.end());
    if (cand.size() > tc.max_patch_pairs) cand.resize(tc.max_patch_pairs);

    std::map<std::size_t, std::size_t> match_pq;
    for (const auto& [a, b] : s.labels->fine) match_pq[a] = b;
    std::map<std::size_t, std::size_t> rows_p, rows_q;  // fine index -> gathered row
    struct Patch {
        std::vector<std::size_t> pts_p, pts_q;
    };
    std::vector<Patch> patches;
    for (const auto& [neg, i, j] : cand) {
        Patch pt;
        const auto& pi = ctx.hp.patches[i];
        const auto& qj = ctx.hq.patches[j];
        pt.pts_p.assign(pi.begin(), pi.begin() + static_cast<std::ptrdiff_t>(std::min(pi.size(), tc.max_patch_points)));
        pt.pts_q.assign(qj.begin(), qj.begin() + static_cast<std::ptrdiff_t>(std::min(qj.size(), tc.max_patch_points)));
        for (auto a : pt.pts_p) rows_p.emplace(a, rows_p.size());
        for (auto b : pt.pts_q) rows_q.emplace(b, rows_q.size());
        patches.push_back(std::move(pt));
    }
    auto gather_desc = [](const Tensor& d, const std::map<std::size_t, std::size_t>& rows) {
        Tensor out = Tensor::matrix(rows.size(), d.cols());
        for (const auto& [src, dst] : rows)
            for (std::size_t c = 0; c < d.cols(); ++c) out(dst, c) = d(src, c);
        return out;
    };
    const FeatureMap fp = encode(g, pipe.params, sp_desc, g.input(gather_desc(ctx.dp.fine, rows_p)));
    const FeatureMap fq = encode(g, pipe.params, sq_desc, g.input(gather_desc(ctx.dq.fine, rows_q)));

    const FeaturePair stacked = run_stack(g, pipe.params, fp.super, fq.super, &part, s.prior.group, pipe.config.interaction);
    bool had_positives = true;
    const Var loc = overlap_circle_loss(stacked.p, stacked.q, ov, tc.circle, &had_positives);
    if (!had_positives) std::cerr << "warning: pair " << pair.id << " has no overlapping patch pair; circle loss is 0\n";

    std::vector<PatchScores> scores;
    for (const auto& pt : patches) {
        std::vector<std::size_t> rp, rq;
        for (auto a : pt.pts_p) rp.push_back(rows_p.at(a));
        for (auto b : pt.pts_q) rq.push_back(rows_q.at(b));
        const Var logits = ops::scale(ops::matmul_nt(ops::gather_rows(fp.fine, rp), ops::gather_rows(fq.fine, rq)),
                                      1.0 / tc.match_temperature);
        PatchScores ps{logits, std::vector<std::size_t>(pt.pts_p.size(), pt.pts_q.size()),
                       std::vector<std::size_t>(pt.pts_q.size(), pt.pts_p.size())};
        for (std::size_t a = 0; a < pt.pts_p.size(); ++a) {
            auto it = match_pq.find(pt.pts_p[a]);
            if (it == match_pq.end()) continue;
            auto pos = std::find(pt.pts_q.begin(), pt.pts_q.end(), it->second);
            if (pos == pt.pts_q.end()) continue;
            const auto b = static_cast<std::size_t>(pos - pt.pts_q.begin());
            ps.row_labels[a] = b;
            ps.col_labels[b] = a;
        }
        scores.push_back(std::move(ps));
    }
    const Var lp = point_matching_loss(scores, g.param(pipe.params, "matching/slack"));
    if (parts) *parts = {loc.value().data[0], lp.value().data[0]};
    return ops::add(loc, lp);
}

inline bool trains_with_group(const std::string& name, int group) {
    return name.rfind("encoder/", 0) == 0 || name.rfind("matching/", 0) == 0 ||
           name.rfind(step_prefix(group) + "/", 0) == 0;
}

}  // namespace detail

/// Loss of one sample under the current parameters (no update).
inline SampleLoss evaluate_sample_loss(RefinementPipeline& pipe, const TrainingPair& pair, const TrainingSample& s,
                                       const TrainConfig& tc) {
    Graph g;
    SampleLoss parts;
    detail::sample_loss_graph(g, pipe, pair, s, tc, &parts);
    return parts;
}

struct LossRecord {
    int epoch = 0;
    int group = 0;
    double loss_oc = 0.0;
    double loss_p = 0.0;
    std::size_t samples = 0;
};

inline nlohmann::json to_json(const LossRecord& r) {
    return {{"epoch", r.epoch}, {"group", r.group}, {"loss_oc", r.loss_oc}, {"loss_p", r.loss_p}, {"samples", r.samples}};
}

class TrainingDivergence : public Error {
public:
    using Error::Error;
};

struct TrainResult {
    RefinementPipeline pipeline;
    std::vector<LossRecord> log;          // per epoch and group means
    std::vector<SampleLoss> step_losses;  // per optimizer step (batch mean)
};

/// Trains the shared encoder and the K step stacks. A sample routed to group k only
/// updates the encoder, the matching slack, and step k's stack.
inline TrainResult train(const std::vector<TrainingPair>& data, const TrainConfig& tc, const PipelineConfig& pc,
                         const std::function<void(const LossRecord&)>& on_epoch = {}) {
    tc.validate();
    pc.validate();
    if (tc.schedule.K != pc.steps()) throw Error("train: schedule K must equal the pipeline step count");
    if (data.empty()) throw Error("train: empty dataset");

    TrainResult res{RefinementPipeline::create(pc, *tc.seed), {}, {}};
    RefinementPipeline& pipe = res.pipeline;
    std::map<std::string, Tensor> velocity;
    for (const auto& [name, p] : pipe.params) velocity.emplace(name, Tensor(p.value.shape));

    std::mt19937_64 rng(*tc.seed ^ 0x9E3779B97F4A7C15ull);
    std::vector<std::size_t> order(data.size());
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::map<int, LossRecord> per_group;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
            pipe.params.zero_grad();
            std::vector<int> groups;
            SampleLoss batch_loss;
            for (std::size_t b = start; b < stop; ++b) {
                const TrainingPair& pair = data[order[b]];
                const TrainingSample s = make_training_sample(pair, tc.schedule, rng());
                Graph g;
                SampleLoss parts;
                try {
                    const Var loss = detail::sample_loss_graph(g, pipe, pair, s, tc, &parts);
                    const double scale = 1.0 / static_cast<double>(stop - start);
                    g.backward(ops::scale(loss, scale));
                } catch (const NonFiniteError& e) {
                    throw TrainingDivergence("training diverged at epoch " + std::to_string(epoch) + ", pair " + pair.id +
                                             ": " + e.what());
                }
                groups.push_back(s.prior.group);
                auto& rec = per_group[s.prior.group];
                rec.epoch = epoch;
                rec.group = s.prior.group;
                rec.loss_oc += parts.loss_oc;
                rec.loss_p += parts.loss_p;
                ++rec.samples;
                batch_loss.loss_oc += parts.loss_oc / static_cast<double>(stop - start);
                batch_loss.loss_p += parts.loss_p / static_cast<double>(stop - start);
            }
            res.step_losses.push_back(batch_loss);

            auto touched = [&](const std::string& name) {
                return std::any_of(groups.begin(), groups.end(),
                                   [&](int k) { return detail::trains_with_group(name, k); });
            };
            double norm2 = 0.0;
            for (auto& [name, p] : pipe.params)
                if (touched(name))
                    for (double v : p.grad.data) norm2 += v * v;
            if (!std::isfinite(norm2)) throw TrainingDivergence("non-finite gradient at epoch " + std::to_string(epoch));
            const double norm = std::sqrt(norm2);
            const double clip = tc.grad_clip > 0.0 && norm > tc.grad_clip ? tc.grad_clip / norm : 1.0;
            for (auto& [name, p] : pipe.params) {
                if (!touched(name)) continue;
                Tensor& v = velocity.at(name);
                for (std::size_t i = 0; i < p.value.size(); ++i) {
                    v.data[i] = tc.momentum * v.data[i] + clip * p.grad.data[i];
                    p.value.data[i] -= tc.learning_rate * v.data[i];
                }
            }
        }
        for (auto& [group, rec] : per_group) {
            rec.loss_oc /= static_cast<double>(rec.samples);
            rec.loss_p /= static_cast<double>(rec.samples);
            if (!std::isfinite(rec.loss_oc) || !std::isfinite(rec.loss_p))
                throw TrainingDivergence("non-finite loss at epoch " + std::to_string(epoch));
            res.log.push_back(rec);
            if (on_epoch) on_epoch(rec);
        }
    }
    pipe.params.zero_grad();
    return res;
}

}  // namespace amr
