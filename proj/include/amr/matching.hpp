#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "amr/cloud.hpp"
#include "amr/diffcore.hpp"

namespace amr {

struct CoarseMatch {
    std::size_t p = 0;  // superpoint of P
    std::size_t q = 0;  // superpoint of Q
    double score = 0.0;
};

struct FineMatch {
    std::size_t p = 0;  // fine point of P
    std::size_t q = 0;  // fine point of Q
    double confidence = 0.0;
};

struct CorrespondenceSet {
    std::vector<CoarseMatch> coarse;
    std::vector<FineMatch> fine;
    std::vector<std::size_t> fine_to_coarse;  // index into `coarse` per fine match
};

namespace detail {

inline Eigen::MatrixXd normalized_rows(const Tensor& t) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i) {
        double n = 0.0;
        for (std::size_t j = 0; j < t.cols(); ++j) n += t(i, j) * t(i, j);
        n = std::sqrt(n);
        for (std::size_t j = 0; j < t.cols(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = n > 0.0 ? t(i, j) / n : 0.0;
    }
    return m;
}

}  // namespace detail

/// Cosine similarity between the rows of fp and fq, dual-normalized by the product of the
/// row-wise and column-wise softmax.
inline Eigen::MatrixXd dual_normalized_similarity(const Tensor& fp, const Tensor& fq) {
    ops::require(fp.cols() == fq.cols(), "coarse_match feature widths");
    const Eigen::MatrixXd s = detail::normalized_rows(fp) * detail::normalized_rows(fq).transpose();
    if (s.size() == 0) return s;
    Eigen::MatrixXd row = s, col = s;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        row.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
        row.row(i) /= row.row(i).sum();
    }
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        col.col(j) = (s.col(j).array() - s.col(j).maxCoeff()).exp();
        col.col(j) /= col.col(j).sum();
    }
    return row.cwiseProduct(col);
}

/// The top_k entries of the dual-normalized map, scores divided by the best score.
/// Ties break lexicographically on (p, q).
inline std::vector<CoarseMatch> coarse_match(const Tensor& fp, const Tensor& fq, std::size_t top_k) {
    if (top_k < 1) throw Error("coarse_match: top_k must be >= 1");
    const Eigen::MatrixXd m = dual_normalized_similarity(fp, fq);
    std::vector<CoarseMatch> all;
    all.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            all.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), m(i, j)});
    const std::size_t k = std::min(top_k, all.size());
    const auto better = [](const CoarseMatch& a, const CoarseMatch& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.p != b.p) return a.p < b.p;
        return a.q < b.q;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
    all.resize(k);
    if (!all.empty() && all.front().score > 0.0) {
        const double top = all.front().score;
        for (auto& c : all) c.score = std::min(1.0, c.score / top);
    }
    return all;
}

/// Mutual nearest neighbors by cosine similarity of fine features inside each coarse patch
/// pair; pairs with similarity >= conf_thresh are kept.
inline CorrespondenceSet fine_match(const std::vector<CoarseMatch>& coarse, const HierarchicalCloud& hp,
                                    const HierarchicalCloud& hq, const Tensor& fine_p, const Tensor& fine_q,
                                    double conf_thresh) {
    if (coarse.empty()) throw Error("fine_match: no coarse correspondences");
    ops::require(fine_p.rows() == hp.fine.size() && fine_q.rows() == hq.fine.size(), "fine_match feature rows");
    ops::require(fine_p.cols() == fine_q.cols(), "fine_match feature widths");
    const Eigen::MatrixXd np = detail::normalized_rows(fine_p);
    const Eigen::MatrixXd nq = detail::normalized_rows(fine_q);

    CorrespondenceSet out;
    out.coarse = coarse;
    for (std::size_t c = 0; c < coarse.size(); ++c) {
        const auto& pi = hp.patches.at(coarse[c].p);
        const auto& qj = hq.patches.at(coarse[c].q);
        Eigen::MatrixXd sim(static_cast<Eigen::Index>(pi.size()), static_cast<Eigen::Index>(qj.size()));
        for (std::size_t a = 0; a < pi.size(); ++a)
            for (std::size_t b = 0; b < qj.size(); ++b)
                sim(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                    np.row(static_cast<Eigen::Index>(pi[a])).dot(nq.row(static_cast<Eigen::Index>(qj[b])));
        // first maximum in index order resolves ties toward the lowest index
        std::vector<Eigen::Index> row_best(pi.size()), col_best(qj.size());
        for (Eigen::Index a = 0; a < sim.rows(); ++a) sim.row(a).maxCoeff(&row_best[static_cast<std::size_t>(a)]);
        for (Eigen::Index b = 0; b < sim.cols(); ++b) sim.col(b).maxCoeff(&col_best[static_cast<std::size_t>(b)]);
        for (std::size_t a = 0; a < pi.size(); ++a) {
            const auto b = row_best[a];
            if (col_best[static_cast<std::size_t>(b)] != static_cast<Eigen::Index>(a)) continue;
            const double s = sim(static_cast<Eigen::Index>(a), b);
            if (s < conf_thresh) continue;
            out.fine.push_back({pi[a], qj[static_cast<std::size_t>(b)], std::clamp(s, 0.0, 1.0)});
            out.fine_to_coarse.push_back(c);
        }
    }
    return out;
}

/// The n most confident fine matches (ties by index order), e.g. for metric tables.
inline std::vector<FineMatch> top_confident(const std::vector<FineMatch>& fine, std::size_t n) {
    std::vector<FineMatch> out = fine;
    std::stable_sort(out.begin(), out.end(), [](const FineMatch& a, const FineMatch& b) { return a.confidence > b.confidence; });
    if (out.size() > n) out.resize(n);
    return out;
}

}  // namespace amr
