#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <vector>

#include <Eigen/SVD>
#include <json.hpp>

#include "amr/cloud.hpp"
#include "amr/matching.hpp"

namespace amr {

struct WeightedPair {
    Vec3 p;
    Vec3 q;
    double weight = 1.0;
};

struct EstimatorReport {
    RigidTransform transform;
    std::size_t inliers = 0;
    double inlier_threshold = 0.0;
    int iterations = 0;
};

inline nlohmann::json to_json(const EstimatorReport& r) {
    return {{"transform", to_json(r.transform)},
            {"inliers", r.inliers},
            {"inlier_threshold", r.inlier_threshold},
            {"iterations", r.iterations}};
}

/// Closed-form minimizer of sum w_i |R p_i + t - q_i|^2 with det(R) = +1.
inline RigidTransform weighted_procrustes(std::span<const WeightedPair> pairs) {
    if (pairs.size() < 3) throw EstimationError("degenerate correspondences");
    double wsum = 0.0;
    Vec3 cp = Vec3::Zero(), cq = Vec3::Zero();
    for (const auto& c : pairs) {
        if (c.weight < 0.0) throw EstimationError("degenerate correspondences");
        wsum += c.weight;
        cp += c.weight * c.p;
        cq += c.weight * c.q;
    }
    if (!(wsum > 0.0)) throw EstimationError("degenerate correspondences");
    cp /= wsum;
    cq /= wsum;
    Mat3 h = Mat3::Zero();
    for (const auto& c : pairs) h += c.weight * (c.p - cp) * (c.q - cq).transpose();
    const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    // rank < 2 means the points are coincident or collinear
    if (!(sv[0] > 1e-18) || sv[1] <= 1e-12 * sv[0]) throw EstimationError("degenerate correspondences");
    const Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    if ((v * u.transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    const Mat3 r = v * d * u.transpose();
    const UnitQuaternion q = UnitQuaternion::from_matrix(r);
    return {q, cq - q.rotate(cp)};
}

inline double weighted_residual(const RigidTransform& x, std::span<const WeightedPair> pairs) {
    double s = 0.0;
    for (const auto& c : pairs) s += c.weight * (x.apply(c.p) - c.q).squaredNorm();
    return s;
}

namespace detail {

struct InlierStats {
    std::size_t count = 0;
    double mean_sq = 0.0;
};

inline InlierStats count_inliers(const RigidTransform& x, std::span<const WeightedPair> pairs, double radius,
                                 std::vector<std::size_t>* which = nullptr) {
    InlierStats s;
    const double r2 = radius * radius;
    double acc = 0.0;
    if (which) which->clear();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const double d2 = (x.apply(pairs[i].p) - pairs[i].q).squaredNorm();
        if (d2 <= r2) {
            ++s.count;
            acc += d2;
            if (which) which->push_back(i);
        }
    }
    s.mean_sq = s.count ? acc / static_cast<double>(s.count) : std::numeric_limits<double>::infinity();
    return s;
}

inline bool better(const InlierStats& a, const InlierStats& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.mean_sq < b.mean_sq;
}

inline std::vector<WeightedPair> subset(std::span<const WeightedPair> pairs, const std::vector<std::size_t>& idx) {
    std::vector<WeightedPair> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(pairs[i]);
    return out;
}

}  // namespace detail

struct RansacOptions {
    int iterations = 1000;
    double inlier_radius = 0.05;
    std::uint64_t seed = 0;
    bool weighted_sampling = true;  // draw minimal sets proportionally to confidence
};

/// Best 3-point hypothesis by inlier count (ties: lower mean squared residual), refit on its inliers.
inline EstimatorReport ransac(std::span<const WeightedPair> pairs, const RansacOptions& opt) {
    if (pairs.size() < 3) throw EstimationError("degenerate correspondences");
    std::mt19937_64 rng(opt.seed);
    std::vector<double> w(pairs.size(), 1.0);
    if (opt.weighted_sampling) {
        double total = 0.0;
        for (std::size_t i = 0; i < pairs.size(); ++i) total += (w[i] = std::max(pairs[i].weight, 0.0));
        if (!(total > 0.0)) std::fill(w.begin(), w.end(), 1.0);
    }
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    const std::size_t drawable = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double v) { return v > 0.0; }));
    if (drawable < 3) throw EstimationError("degenerate correspondences");

    bool any_valid = false;
    RigidTransform best;
    detail::InlierStats best_stats;
    for (int it = 0; it < opt.iterations; ++it) {
        std::size_t idx[3];
        idx[0] = pick(rng);
        do idx[1] = pick(rng);
        while (idx[1] == idx[0]);
        do idx[2] = pick(rng);
        while (idx[2] == idx[0] || idx[2] == idx[1]);
        const WeightedPair sample[3] = {{pairs[idx[0]].p, pairs[idx[0]].q, 1.0},
                                        {pairs[idx[1]].p, pairs[idx[1]].q, 1.0},
                                        {pairs[idx[2]].p, pairs[idx[2]].q, 1.0}};
        RigidTransform hyp;
        try {
            hyp = weighted_procrustes(sample);
        } catch (const EstimationError&) {
            continue;
        }
        const auto stats = detail::count_inliers(hyp, pairs, opt.inlier_radius);
        if (!any_valid || detail::better(stats, best_stats)) {
            best = hyp;
            best_stats = stats;
            any_valid = true;
        }
    }
    if (!any_valid) throw EstimationError("degenerate correspondences");
    if (best_stats.count < 3) throw EstimationError("estimation failed");

    std::vector<std::size_t> inl;
    detail::count_inliers(best, pairs, opt.inlier_radius, &inl);
    try {
        const auto sub = detail::subset(pairs, inl);
        best = weighted_procrustes(sub);
    } catch (const EstimationError&) {
        // keep the minimal-set hypothesis
    }
    return {best, detail::count_inliers(best, pairs, opt.inlier_radius).count, opt.inlier_radius, opt.iterations};
}

inline std::vector<WeightedPair> to_pairs(const CorrespondenceSet& corr, const HierarchicalCloud& hp,
                                          const HierarchicalCloud& hq) {
    std::vector<WeightedPair> out;
    out.reserve(corr.fine.size());
    for (const auto& m : corr.fine) out.push_back({hp.fine.points.at(m.p), hq.fine.points.at(m.q), m.confidence});
    return out;
}

struct LgrOptions {
    double inlier_radius = 0.05;
    int refine_iters = 5;
};

/// Local-to-global registration: one hypothesis per patch pair, selected by global inlier
/// count, then refit on inliers while the inlier count does not drop.
inline EstimatorReport lgr(const CorrespondenceSet& corr, const HierarchicalCloud& hp, const HierarchicalCloud& hq,
                           const LgrOptions& opt) {
    const std::vector<WeightedPair> pairs = to_pairs(corr, hp, hq);
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < corr.fine.size(); ++i) groups[corr.fine_to_coarse.at(i)].push_back(i);

    bool found = false;
    RigidTransform best;
    detail::InlierStats best_stats;
    for (const auto& [patch, members] : groups) {
        if (members.size() < 3) continue;
        RigidTransform hyp;
        try {
            const auto sub = detail::subset(pairs, members);
            hyp = weighted_procrustes(sub);
        } catch (const EstimationError&) {
            continue;
        }
        const auto stats = detail::count_inliers(hyp, pairs, opt.inlier_radius);
        if (!found || detail::better(stats, best_stats)) {
            best = hyp;
            best_stats = stats;
            found = true;
        }
    }
    if (!found) throw EstimationError("estimation failed");

    int rounds = 0;
    for (int r = 0; r < opt.refine_iters; ++r) {
        std::vector<std::size_t> inl;
        detail::count_inliers(best, pairs, opt.inlier_radius, &inl);
        RigidTransform refit;
        try {
            const auto sub = detail::subset(pairs, inl);
            refit = weighted_procrustes(sub);
        } catch (const EstimationError&) {
            break;
        }
        const auto stats = detail::count_inliers(refit, pairs, opt.inlier_radius);
        if (stats.count < best_stats.count) break;
        best = refit;
        best_stats = stats;
        ++rounds;
    }
    return {best, best_stats.count, opt.inlier_radius, rounds};
}

}  // namespace amr
