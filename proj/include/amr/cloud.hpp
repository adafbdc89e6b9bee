#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "amr/geometry.hpp"

namespace amr {

struct PointCloud {
    std::vector<Vec3> points;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }
};

using VoxelKey = std::array<std::int64_t, 3>;

inline VoxelKey voxel_key(const Vec3& p, double size) {
    return {static_cast<std::int64_t>(std::floor(p.x() / size)), static_cast<std::int64_t>(std::floor(p.y() / size)),
            static_cast<std::int64_t>(std::floor(p.z() / size))};
}

/// One centroid per occupied voxel, ordered by ascending voxel key.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size) {
    if (!(voxel_size > 0.0)) throw Error("voxel_downsample: voxel size must be positive");
    struct Acc {
        Vec3 sum = Vec3::Zero();
        std::size_t n = 0;
    };
    std::map<VoxelKey, Acc> voxels;
    for (const auto& p : cloud.points) {
        auto& acc = voxels[voxel_key(p, voxel_size)];
        acc.sum += p;
        ++acc.n;
    }
    PointCloud out;
    out.points.reserve(voxels.size());
    for (const auto& [key, acc] : voxels) out.points.push_back(acc.sum / static_cast<double>(acc.n));
    return out;
}

/// Uniform-grid spatial index over a fixed point set. Small sets are scanned linearly.
class GridIndex {
public:
    static constexpr std::size_t kBruteForceBelow = 256;

    GridIndex(std::span<const Vec3> points, double cell_size) : points_(points.begin(), points.end()), cell_(cell_size) {
        if (!(cell_size > 0.0)) throw Error("GridIndex: cell size must be positive");
        if (points_.size() < kBruteForceBelow) return;
        for (std::size_t i = 0; i < points_.size(); ++i) cells_[voxel_key(points_[i], cell_)].push_back(i);
    }

    std::size_t size() const { return points_.size(); }
    const std::vector<Vec3>& points() const { return points_; }

    /// Indices of all points within `radius` of q, ascending.
    std::vector<std::size_t> radius_search(const Vec3& q, double radius) const {
        std::vector<std::size_t> out;
        const double r2 = radius * radius;
        if (brute()) {
            for (std::size_t i = 0; i < points_.size(); ++i)
                if ((points_[i] - q).squaredNorm() <= r2) out.push_back(i);
            return out;
        }
        const auto reach = static_cast<std::int64_t>(std::ceil(radius / cell_));
        const VoxelKey c = voxel_key(q, cell_);
        for (std::int64_t dx = -reach; dx <= reach; ++dx)
            for (std::int64_t dy = -reach; dy <= reach; ++dy)
                for (std::int64_t dz = -reach; dz <= reach; ++dz) {
                    auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
                    if (it == cells_.end()) continue;
                    for (auto i : it->second)
                        if ((points_[i] - q).squaredNorm() <= r2) out.push_back(i);
                }
        std::sort(out.begin(), out.end());
        return out;
    }

    bool any_within(const Vec3& q, double radius) const {
        const double r2 = radius * radius;
        if (brute()) {
            return std::any_of(points_.begin(), points_.end(), [&](const Vec3& p) { return (p - q).squaredNorm() <= r2; });
        }
        const auto reach = static_cast<std::int64_t>(std::ceil(radius / cell_));
        const VoxelKey c = voxel_key(q, cell_);
        for (std::int64_t dx = -reach; dx <= reach; ++dx)
            for (std::int64_t dy = -reach; dy <= reach; ++dy)
                for (std::int64_t dz = -reach; dz <= reach; ++dz) {
                    auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
                    if (it == cells_.end()) continue;
                    for (auto i : it->second)
                        if ((points_[i] - q).squaredNorm() <= r2) return true;
                }
        return false;
    }

    /// The k nearest points ordered by (distance, index). Returns fewer when the set is smaller.
    std::vector<std::size_t> knn(const Vec3& q, std::size_t k) const {
        std::vector<std::pair<double, std::size_t>> cand;
        k = std::min(k, points_.size());
        if (k == 0) return {};
        if (brute()) {
            cand.reserve(points_.size());
            for (std::size_t i = 0; i < points_.size(); ++i) cand.emplace_back((points_[i] - q).squaredNorm(), i);
        } else {
            const VoxelKey c = voxel_key(q, cell_);
            std::size_t visited = 0;
            for (std::int64_t ring = 0;; ++ring) {
                visit_shell(c, ring, [&](std::size_t i) {
                    cand.emplace_back((points_[i] - q).squaredNorm(), i);
                    ++visited;
                });
                if (visited == points_.size()) break;
                if (cand.size() >= k) {
                    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end());
                    // anything outside the searched cube is farther than ring * cell
                    const double safe = static_cast<double>(ring) * cell_;
                    if (cand[k - 1].first < safe * safe) break;
                }
            }
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        std::vector<std::size_t> out(k);
        for (std::size_t i = 0; i < k; ++i) out[i] = cand[i].second;
        return out;
    }

    std::optional<std::size_t> nearest(const Vec3& q) const {
        auto r = knn(q, 1);
        if (r.empty()) return std::nullopt;
        return r.front();
    }

private:
    bool brute() const { return points_.size() < kBruteForceBelow; }

    template <class F>
    void visit_shell(const VoxelKey& c, std::int64_t ring, F&& f) const {
        for (std::int64_t dx = -ring; dx <= ring; ++dx)
            for (std::int64_t dy = -ring; dy <= ring; ++dy)
                for (std::int64_t dz = -ring; dz <= ring; ++dz) {
                    if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                    auto it = cells_.find({c[0] + dx, c[1] + dy, c[2] + dz});
                    if (it == cells_.end()) continue;
                    for (auto i : it->second) f(i);
                }
    }

    struct KeyHash {
        std::size_t operator()(const VoxelKey& k) const {
            std::uint64_t h = 1469598103934665603ull;
            for (auto v : k) h = (h ^ static_cast<std::uint64_t>(v)) * 1099511628211ull;
            return static_cast<std::size_t>(h);
        }
    };

    std::vector<Vec3> points_;
    double cell_;
    std::unordered_map<VoxelKey, std::vector<std::size_t>, KeyHash> cells_;
};

/// Fine points, superpoints, and the point-to-node assignment between them.
struct HierarchicalCloud {
    PointCloud fine;
    PointCloud super;
    std::vector<std::size_t> assignment;            // fine index -> superpoint index
    std::vector<std::vector<std::size_t>> patches;  // superpoint index -> fine indices, ascending
    double fine_voxel = 0.0;
    double super_voxel = 0.0;

    std::size_t num_super() const { return super.size(); }

    std::vector<Vec3> patch_points(std::size_t s) const {
        std::vector<Vec3> out;
        out.reserve(patches[s].size());
        for (auto i : patches[s]) out.push_back(fine.points[i]);
        return out;
    }
};

/// Index of the nearest candidate; ties resolve to the lowest index.
inline std::size_t nearest_index(const Vec3& p, std::span<const Vec3> candidates) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < candidates.size(); ++j) {
        const double d = (candidates[j] - p).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return best;
}

inline HierarchicalCloud build_hierarchy(const PointCloud& cloud, double fine_voxel, double super_voxel) {
    if (!(fine_voxel > 0.0) || !(super_voxel > fine_voxel)) {
        throw Error("build_hierarchy: need super_voxel > fine_voxel > 0");
    }
    HierarchicalCloud h;
    h.fine_voxel = fine_voxel;
    h.super_voxel = super_voxel;
    h.fine = voxel_downsample(cloud, fine_voxel);
    PointCloud super = voxel_downsample(h.fine, super_voxel);
    if (super.empty()) throw Error("degenerate cloud");

    std::vector<std::size_t> raw(h.fine.size());
    std::vector<std::size_t> counts(super.size(), 0);
    for (std::size_t i = 0; i < h.fine.size(); ++i) {
        raw[i] = nearest_index(h.fine.points[i], super.points);
        ++counts[raw[i]];
    }
    // drop superpoints that ended up with an empty patch
    std::vector<std::size_t> remap(super.size(), 0);
    for (std::size_t s = 0; s < super.size(); ++s) {
        if (counts[s] == 0) continue;
        remap[s] = h.super.size();
        h.super.points.push_back(super.points[s]);
    }
    h.patches.resize(h.super.size());
    h.assignment.resize(h.fine.size());
    for (std::size_t i = 0; i < h.fine.size(); ++i) {
        h.assignment[i] = remap[raw[i]];
        h.patches[h.assignment[i]].push_back(i);
    }
    return h;
}

/// Fraction of patch_a points whose image under x lies within radius of patch_b.
inline double patch_overlap(std::span<const Vec3> patch_a, std::span<const Vec3> patch_b, const RigidTransform& x,
                            double radius) {
    if (!(radius > 0.0)) throw Error("patch_overlap: radius must be positive");
    if (patch_a.empty()) throw Error("patch_overlap: empty source patch");
    if (patch_b.empty()) return 0.0;
    const GridIndex index(patch_b, radius);
    std::size_t hit = 0;
    for (const auto& p : patch_a)
        if (index.any_within(x.apply(p), radius)) ++hit;
    return static_cast<double>(hit) / static_cast<double>(patch_a.size());
}

/// Dense matrix of patch_overlap(patch_i of a, patch_j of b) under x.
inline Eigen::MatrixXd patch_overlap_matrix(const HierarchicalCloud& a, const HierarchicalCloud& b, const RigidTransform& x,
                                            double radius) {
    if (!(radius > 0.0)) throw Error("patch_overlap_matrix: radius must be positive");
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(a.num_super()),
                                                   static_cast<Eigen::Index>(b.num_super()));
    const GridIndex index(b.fine.points, radius);
    std::vector<char> hit(b.num_super());
    for (std::size_t i = 0; i < a.fine.size(); ++i) {
        const auto nb = index.radius_search(x.apply(a.fine.points[i]), radius);
        if (nb.empty()) continue;
        std::fill(hit.begin(), hit.end(), 0);
        for (auto j : nb) hit[b.assignment[j]] = 1;
        for (std::size_t s = 0; s < hit.size(); ++s)
            if (hit[s]) counts(static_cast<Eigen::Index>(a.assignment[i]), static_cast<Eigen::Index>(s)) += 1.0;
    }
    for (std::size_t s = 0; s < a.num_super(); ++s)
        counts.row(static_cast<Eigen::Index>(s)) /= static_cast<double>(a.patches[s].size());
    return counts;
}

struct AnchorPartition {
    std::vector<std::size_t> anchors_p, nonanchors_p, anchors_q, nonanchors_q;
};

/// Superpoint i of P is an anchor iff its patch, moved by x, overlaps some patch of Q
/// by more than `threshold` (0 gives the strict "> 0" rule). Q uses x^-1.
inline AnchorPartition anchor_split(const HierarchicalCloud& hp, const HierarchicalCloud& hq, const RigidTransform& x,
                                    double radius, double threshold = 0.0) {
    AnchorPartition part;
    const auto split = [&](const Eigen::MatrixXd& m, std::vector<std::size_t>& anchors, std::vector<std::size_t>& rest) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double best = m.cols() > 0 ? m.row(i).maxCoeff() : 0.0;
            (best > threshold ? anchors : rest).push_back(static_cast<std::size_t>(i));
        }
    };
    split(patch_overlap_matrix(hp, hq, x, radius), part.anchors_p, part.nonanchors_p);
    split(patch_overlap_matrix(hq, hp, x.inverse(), radius), part.anchors_q, part.nonanchors_q);
    return part;
}

struct OverlapSample {
    std::vector<Vec3> points;  // fine points of P, in P's frame
    double ratio = 0.0;
};

inline OverlapSample gt_overlap_sample(const HierarchicalCloud& hp, const HierarchicalCloud& hq, const RigidTransform& gt,
                                       double radius) {
    OverlapSample out;
    if (hp.fine.empty()) return out;
    const GridIndex index(hq.fine.points, radius);
    for (const auto& p : hp.fine.points)
        if (index.any_within(gt.apply(p), radius)) out.points.push_back(p);
    out.ratio = static_cast<double>(out.points.size()) / static_cast<double>(hp.fine.size());
    return out;
}

}  // namespace amr
