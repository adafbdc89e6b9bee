#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Eigenvalues>

#include "amr/cloud.hpp"
#include "amr/diffcore.hpp"

namespace amr {

/// Channels of the handcrafted descriptor:
///   0-2  covariance eigenvalues of the neighborhood, descending, in units of ref_scale^2
///   3    density proxy 1 / (1 + r_k / ref_scale), r_k the distance to the farthest neighbor
///   4    height of the point above the neighborhood centroid, in units of ref_scale
///   5-12 histogram of neighbor distances / r_k over 8 equal bins (fractions)
inline constexpr std::size_t kDescriptorWidth = 13;
inline constexpr std::size_t kHistogramBins = 8;

/// Descriptor of each query from its `neighbors` nearest points in `cloud`. When the cloud
/// holds fewer points the neighborhood is padded with the query point itself.
inline Tensor local_descriptor(std::span<const Vec3> cloud, std::span<const Vec3> queries, std::size_t neighbors,
                               double ref_scale, const GridIndex* index = nullptr) {
    if (neighbors < 4) throw Error("local_descriptor: neighbors must be >= 4");
    if (!(ref_scale > 0.0)) throw Error("local_descriptor: ref_scale must be positive");
    std::optional<GridIndex> own;
    if (!index) {
        own.emplace(cloud, ref_scale * 2.0);
        index = &*own;
    }
    Tensor out = Tensor::matrix(queries.size(), kDescriptorWidth);
    std::vector<Vec3> nb;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const Vec3& q = queries[qi];
        nb.clear();
        for (auto i : index->knn(q, neighbors)) nb.push_back(cloud[i]);
        while (nb.size() < neighbors) nb.push_back(q);

        Vec3 mean = Vec3::Zero();
        for (const auto& p : nb) mean += p;
        mean /= static_cast<double>(nb.size());
        Mat3 cov = Mat3::Zero();
        for (const auto& p : nb) cov += (p - mean) * (p - mean).transpose();
        cov /= static_cast<double>(nb.size());
        const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov, Eigen::EigenvaluesOnly);
        const Vec3 ev = eig.eigenvalues();  // ascending

        double rk = 0.0;
        for (const auto& p : nb) rk = std::max(rk, (p - q).norm());

        double* row = &out.data[qi * kDescriptorWidth];
        const double r2 = ref_scale * ref_scale;
        row[0] = std::max(ev[2], 0.0) / r2;
        row[1] = std::max(ev[1], 0.0) / r2;
        row[2] = std::max(ev[0], 0.0) / r2;
        row[3] = 1.0 / (1.0 + rk / ref_scale);
        row[4] = (q.z() - mean.z()) / ref_scale;
        const double w = 1.0 / static_cast<double>(nb.size());
        for (const auto& p : nb) {
            std::size_t bin = 0;
            if (rk > 0.0) {
                bin = static_cast<std::size_t>((p - q).norm() / rk * static_cast<double>(kHistogramBins));
                bin = std::min(bin, kHistogramBins - 1);
            }
            row[5 + bin] += w;
        }
    }
    return out;
}

/// Gravity-aligned context of each query within `radius`: histogram of neighbor heights relative
/// to the query over [-radius, radius], histogram of horizontal distances over [0, radius] (both
/// fractions of the neighborhood), and the neighbor count in units of (radius / voxel)^2.
inline constexpr std::size_t kContextBins = 8;
inline constexpr std::size_t kContextWidth = 2 * kContextBins + 1;

inline Tensor context_descriptor(std::span<const Vec3> cloud, std::span<const Vec3> queries, double radius, double voxel) {
    if (!(radius > 0.0) || !(voxel > 0.0)) throw Error("context_descriptor: radius and voxel must be positive");
    const GridIndex index(cloud, radius);
    Tensor out = Tensor::matrix(queries.size(), kContextWidth);
    const auto bins = static_cast<double>(kContextBins);
    auto bin_of = [&](double u) { return std::min(static_cast<std::size_t>(std::max(u, 0.0) * bins), kContextBins - 1); };
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const Vec3& q = queries[qi];
        const auto nb = index.radius_search(q, radius);
        double* row = &out.data[qi * kContextWidth];
        if (nb.empty()) continue;
        const double w = 1.0 / static_cast<double>(nb.size());
        for (auto i : nb) {
            const Vec3 d = cloud[i] - q;
            row[bin_of((d.z() / radius + 1.0) / 2.0)] += w;
            row[kContextBins + bin_of(std::hypot(d.x(), d.y()) / radius)] += w;
        }
        row[2 * kContextBins] = static_cast<double>(nb.size()) * (voxel / radius) * (voxel / radius);
    }
    return out;
}

/// Height of each query above the 2nd percentile of the cloud heights (the floor of a gravity-aligned scan).
inline std::vector<double> height_above_floor(std::span<const Vec3> cloud, std::span<const Vec3> queries) {
    std::vector<double> z;
    z.reserve(cloud.size());
    for (const auto& p : cloud) z.push_back(p.z());
    std::vector<double> out(queries.size(), 0.0);
    if (z.empty()) return out;
    const auto k = static_cast<std::ptrdiff_t>(z.size() / 50);
    std::nth_element(z.begin(), z.begin() + k, z.end());
    for (std::size_t i = 0; i < queries.size(); ++i) out[i] = queries[i].z() - z[static_cast<std::size_t>(k)];
    return out;
}

struct Descriptors {
    Tensor fine;   // [F, kFineDescriptorWidth]
    Tensor super;  // [S, kSuperDescriptorWidth]
};

/// Fine channels: local descriptor (13), context at 3x and 6x the fine voxel (17 each), height
/// above floor in units of the outer context radius (1).
inline constexpr std::size_t kFineDescriptorWidth = kDescriptorWidth + 2 * kContextWidth + 1;

/// Superpoint channels: wide-neighborhood local descriptor (13), patch mean of the fine local
/// descriptors (13), context at 2x and 4x the superpoint voxel (17 each), height above floor in
/// units of the outer context radius (1).
inline constexpr std::size_t kSuperDescriptorWidth = 2 * kDescriptorWidth + 2 * kContextWidth + 1;

namespace detail {

inline void put_cols(Tensor& dst, std::size_t row, std::size_t& col, const Tensor& src) {
    for (std::size_t k = 0; k < src.cols(); ++k) dst(row, col++) = src(row, k);
}

/// Zero mean, unit variance per column; constant columns become 0.
inline void standardize_columns(Tensor& t) {
    const std::size_t n = t.rows(), w = t.cols();
    if (n == 0) return;
    for (std::size_t c = 0; c < w; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += t(r, c);
        mean /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) var += (t(r, c) - mean) * (t(r, c) - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        for (std::size_t r = 0; r < n; ++r) t(r, c) = sd > 1e-12 ? (t(r, c) - mean) / sd : 0.0;
    }
}

}  // namespace detail

/// Descriptors for both levels of a hierarchy, each channel standardized over the cloud.
/// Superpoints look at 4x as many fine neighbors.
inline Descriptors describe(const HierarchicalCloud& h, std::size_t neighbors) {
    Descriptors d;
    const auto& fine = h.fine.points;
    const GridIndex index(fine, h.fine_voxel * 2.0);
    const Tensor local = local_descriptor(fine, fine, neighbors, h.fine_voxel, &index);
    const Tensor fine_near = context_descriptor(fine, fine, 3.0 * h.fine_voxel, h.fine_voxel);
    const Tensor fine_far = context_descriptor(fine, fine, 6.0 * h.fine_voxel, h.fine_voxel);
    const auto fine_height = height_above_floor(fine, fine);
    d.fine = Tensor::matrix(h.fine.size(), kFineDescriptorWidth);
    for (std::size_t i = 0; i < h.fine.size(); ++i) {
        std::size_t c = 0;
        detail::put_cols(d.fine, i, c, local);
        detail::put_cols(d.fine, i, c, fine_near);
        detail::put_cols(d.fine, i, c, fine_far);
        d.fine(i, c) = fine_height[i] / (6.0 * h.fine_voxel);
    }

    const Tensor wide = local_descriptor(fine, h.super.points, neighbors * 4, h.super_voxel, &index);
    const Tensor near = context_descriptor(fine, h.super.points, 2.0 * h.super_voxel, h.fine_voxel);
    const Tensor far = context_descriptor(fine, h.super.points, 4.0 * h.super_voxel, h.fine_voxel);
    const auto height = height_above_floor(fine, h.super.points);
    d.super = Tensor::matrix(h.num_super(), kSuperDescriptorWidth);
    for (std::size_t s = 0; s < h.num_super(); ++s) {
        std::size_t c = 0;
        detail::put_cols(d.super, s, c, wide);
        const double inv = 1.0 / static_cast<double>(h.patches[s].size());
        for (auto i : h.patches[s])
            for (std::size_t k = 0; k < kDescriptorWidth; ++k) d.super(s, c + k) += local(i, k) * inv;
        c += kDescriptorWidth;
        detail::put_cols(d.super, s, c, near);
        detail::put_cols(d.super, s, c, far);
        d.super(s, c) = height[s] / (4.0 * h.super_voxel);
    }
    detail::standardize_columns(d.fine);
    detail::standardize_columns(d.super);
    return d;
}

struct EncoderConfig {
    std::size_t super_width = 64;  // D
    std::size_t fine_width = 32;   // D_f
    std::size_t hidden = 64;
};

inline void init_encoder(ParameterSet& ps, const EncoderConfig& cfg, std::mt19937_64& rng) {
    init_linear(ps, "encoder/super/fc1", kSuperDescriptorWidth, cfg.hidden, rng);
    init_linear(ps, "encoder/super/fc2", cfg.hidden, cfg.super_width, rng);
    init_linear(ps, "encoder/fine/fc1", kFineDescriptorWidth, cfg.hidden, rng);
    init_linear(ps, "encoder/fine/fc2", cfg.hidden, cfg.fine_width, rng);
}

struct FeatureMap {
    Var super;  // [S, D]
    Var fine;   // [F, D_f], unit rows
};

/// Two-layer projections of the descriptors; fine features are L2-normalized.
inline FeatureMap encode(Graph& g, ParameterSet& ps, Var super_desc, Var fine_desc) {
    const Var s = linear(g, ps, "encoder/super/fc2", ops::relu(linear(g, ps, "encoder/super/fc1", super_desc)));
    const Var f = linear(g, ps, "encoder/fine/fc2", ops::relu(linear(g, ps, "encoder/fine/fc1", fine_desc)));
    return {s, ops::l2_normalize_rows(f)};
}

inline FeatureMap encode(Graph& g, ParameterSet& ps, const Descriptors& d) {
    return encode(g, ps, g.input(d.super), g.input(d.fine));
}

}  // namespace amr
