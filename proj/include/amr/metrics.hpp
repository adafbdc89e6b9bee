#pragma once

#include <limits>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include <json.hpp>

#include "amr/geometry.hpp"

namespace amr {

inline constexpr double kDefaultRmseThreshold = 0.2;   // meters
inline constexpr double kDefaultIrThreshold = 0.05;    // fraction
inline constexpr double kDefaultRreThreshold = 5.0 * 3.14159265358979323846 / 180.0;  // radians
inline constexpr double kDefaultRteThreshold = 2.0;    // meters
// Residual radius for inlier ratio; community convention, not fixed by the method itself.
inline constexpr double kIndoorIrRadius = 0.1;
inline constexpr double kOutdoorIrRadius = 0.6;

struct PairEvaluation {
    double rmse = 0.0;
    double rre = 0.0;  // radians
    double rte = 0.0;
    double inlier_ratio = 0.0;
    std::size_t correspondences = 0;
    double overlap = 0.0;
};

/// Fraction of (p, q) pairs with |gt(p) - q| <= radius; 0 for an empty set.
inline double inlier_ratio(std::span<const std::pair<Vec3, Vec3>> corr, const RigidTransform& gt, double radius) {
    if (!(radius > 0.0)) throw Error("inlier_ratio: radius must be positive");
    if (corr.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& [p, q] : corr)
        if ((gt.apply(p) - q).norm() <= radius) ++n;
    return static_cast<double>(n) / static_cast<double>(corr.size());
}

namespace detail {
template <class Pred>
double fraction(std::span<const PairEvaluation> evals, const char* what, Pred pred) {
    if (evals.empty()) throw Error(std::string(what) + ": empty evaluation list");
    std::size_t n = 0;
    for (const auto& e : evals)
        if (pred(e)) ++n;
    return static_cast<double>(n) / static_cast<double>(evals.size());
}
}  // namespace detail

inline double registration_recall(std::span<const PairEvaluation> evals, double rmse_thresh = kDefaultRmseThreshold) {
    return detail::fraction(evals, "registration_recall", [&](const PairEvaluation& e) { return e.rmse < rmse_thresh; });
}

inline double fmr(std::span<const PairEvaluation> evals, double ir_thresh = kDefaultIrThreshold) {
    return detail::fraction(evals, "fmr", [&](const PairEvaluation& e) { return e.inlier_ratio > ir_thresh; });
}

inline double pose_recall(std::span<const PairEvaluation> evals, double rre_thresh = kDefaultRreThreshold,
                          double rte_thresh = kDefaultRteThreshold) {
    return detail::fraction(evals, "pose_recall",
                            [&](const PairEvaluation& e) { return e.rre < rre_thresh && e.rte < rte_thresh; });
}

struct OverlapBin {
    double lo = 0.0;  // inclusive; -inf for the first bin
    double hi = 0.0;  // exclusive; +inf for the last bin
    std::size_t count = 0;
    std::optional<double> recall;  // absent when the bin is empty
};

/// Registration recall per overlap bin. `edges` e1 < ... < en give bins
/// (-inf, e1), [e1, e2), ..., [en, +inf).
inline std::vector<OverlapBin> recall_by_overlap(std::span<const PairEvaluation> evals, std::span<const double> edges,
                                                 double rmse_thresh = kDefaultRmseThreshold) {
    for (std::size_t i = 1; i < edges.size(); ++i)
        if (!(edges[i - 1] < edges[i])) throw Error("recall_by_overlap: edges must be strictly increasing");
    std::vector<OverlapBin> bins(edges.size() + 1);
    for (std::size_t b = 0; b < bins.size(); ++b) {
        bins[b].lo = b == 0 ? -std::numeric_limits<double>::infinity() : edges[b - 1];
        bins[b].hi = b == edges.size() ? std::numeric_limits<double>::infinity() : edges[b];
    }
    for (auto& bin : bins) {
        std::vector<PairEvaluation> members;
        for (const auto& e : evals)
            if (e.overlap >= bin.lo && e.overlap < bin.hi) members.push_back(e);
        bin.count = members.size();
        if (!members.empty()) bin.recall = registration_recall(members, rmse_thresh);
    }
    return bins;
}

inline nlohmann::json to_json(const PairEvaluation& e) {
    return {{"rmse", e.rmse}, {"rre", e.rre}, {"rte", e.rte}, {"inlier_ratio", e.inlier_ratio},
            {"correspondences", e.correspondences}, {"overlap", e.overlap}};
}

}  // namespace amr
