#include <gtest/gtest.h>

#include <set>

#include "amr/matching.hpp"
#include "support.hpp"

using namespace amr;

namespace {

Tensor random_tensor(std::size_t n, std::size_t d, std::uint64_t seed) {
    Tensor t({n, d});
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> u;
    for (auto& v : t.data) v = u(rng);
    return t;
}

// Single cloud of `n` well separated clusters so each patch is one cluster.
HierarchicalCloud clustered(std::size_t clusters, std::size_t per, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    PointCloud c;
    for (std::size_t k = 0; k < clusters; ++k)
        for (std::size_t i = 0; i < per; ++i)
            c.points.push_back(Vec3(5.0 * static_cast<double>(k) + 0.5, 0.5, 0.5) + test::random_vec(rng, 0.3));
    return build_hierarchy(c, 0.05, 2.0);
}

}  // namespace

TEST(CoarseMatch, IdenticalFeaturesRankDiagonalFirst) {
    const Tensor f = random_tensor(6, 8, 1);
    const auto m = coarse_match(f, f, 6);
    std::set<std::pair<std::size_t, std::size_t>> got;
    for (const auto& c : m) got.insert({c.p, c.q});
    for (std::size_t i = 0; i < 6; ++i) EXPECT_TRUE(got.count({i, i}));
    EXPECT_DOUBLE_EQ(m.front().score, 1.0);
    for (const auto& c : m) {
        EXPECT_GE(c.score, 0.0);
        EXPECT_LE(c.score, 1.0);
    }
}

TEST(CoarseMatch, OrthogonalRowsTieLexicographically) {
    Tensor f({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor g({3, 3}, {0, 0, 0, 0, 0, 0, 0, 0, 0});
    // all-zero rows give a constant similarity map
    const auto m = coarse_match(f, g, 4);
    ASSERT_EQ(m.size(), 4u);
    EXPECT_EQ(m[0].p, 0u);
    EXPECT_EQ(m[0].q, 0u);
    EXPECT_EQ(m[1].q, 1u);
    EXPECT_EQ(m[3].p, 1u);
    EXPECT_EQ(m[3].q, 0u);
    for (const auto& c : m) EXPECT_DOUBLE_EQ(c.score, 1.0);
}

TEST(CoarseMatch, MatchesFullArgsort) {
    const Tensor a = random_tensor(7, 5, 2), b = random_tensor(9, 5, 3);
    Eigen::MatrixXd s(7, 9);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 9; ++j) {
            double dot = 0, na = 0, nb = 0;
            for (int k = 0; k < 5; ++k) {
                dot += a(i, k) * b(j, k);
                na += a(i, k) * a(i, k);
                nb += b(j, k) * b(j, k);
            }
            s(i, j) = dot / std::sqrt(na * nb);
        }
    std::vector<std::tuple<double, int, int>> all;
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 9; ++j) {
            double rs = 0, cs = 0;
            for (int k = 0; k < 9; ++k) rs += std::exp(s(i, k));
            for (int k = 0; k < 7; ++k) cs += std::exp(s(k, j));
            all.emplace_back(-(std::exp(s(i, j)) / rs) * (std::exp(s(i, j)) / cs), i, j);
        }
    std::sort(all.begin(), all.end());
    const auto m = coarse_match(a, b, 10);
    ASSERT_EQ(m.size(), 10u);
    for (std::size_t r = 0; r < 10; ++r) {
        EXPECT_EQ(m[r].p, static_cast<std::size_t>(std::get<1>(all[r])));
        EXPECT_EQ(m[r].q, static_cast<std::size_t>(std::get<2>(all[r])));
        EXPECT_NEAR(m[r].score, std::get<0>(all[r]) / std::get<0>(all[0]), 1e-12);
    }
    EXPECT_EQ(coarse_match(a, b, 1000).size(), 63u);
    EXPECT_THROW(coarse_match(a, b, 0), Error);
}

TEST(CoarseMatch, InvariantToCommonRotation) {
    const Tensor a = random_tensor(6, 4, 4), b = random_tensor(5, 4, 5);
    const Eigen::MatrixXd rot = Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::Random(4, 4)).householderQ();
    auto rotate = [&](const Tensor& t) {
        Tensor out = t;
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < 4; ++k) s += t(i, k) * rot(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
                out(i, j) = s;
            }
        return out;
    };
    const auto m1 = coarse_match(a, b, 8), m2 = coarse_match(rotate(a), rotate(b), 8);
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(m1[i].p, m2[i].p);
        EXPECT_EQ(m1[i].q, m2[i].q);
        EXPECT_NEAR(m1[i].score, m2[i].score, 1e-9);
    }
}

TEST(FineMatch, IdenticalPatchesMatchThemselves) {
    const auto h = clustered(3, 60, 6);
    ASSERT_EQ(h.num_super(), 3u);
    const Tensor f = random_tensor(h.fine.size(), 8, 7);
    const std::vector<CoarseMatch> coarse{{0, 0, 1.0}, {1, 1, 1.0}, {2, 2, 1.0}};
    const auto c = fine_match(coarse, h, h, f, f, 0.05);
    EXPECT_EQ(c.fine.size(), h.fine.size());
    for (std::size_t i = 0; i < c.fine.size(); ++i) {
        EXPECT_EQ(c.fine[i].p, c.fine[i].q);
        EXPECT_NEAR(c.fine[i].confidence, 1.0, 1e-12);
        EXPECT_EQ(coarse[c.fine_to_coarse[i]].p, h.assignment[c.fine[i].p]);
    }
    EXPECT_TRUE(fine_match(coarse, h, h, f, f, 1.0 + 1e-9).fine.empty());
    EXPECT_THROW(fine_match({}, h, h, f, f, 0.05), Error);
}

TEST(FineMatch, PlantedPermutationRecovered) {
    const auto hp = clustered(2, 80, 8);
    const auto hq = hp;
    ASSERT_EQ(hp.fine.size(), hq.fine.size());
    // Q's point j carries P's feature perm[j] plus noise, within the same patch
    std::mt19937_64 rng(10);
    std::vector<std::size_t> owner(hq.fine.size());
    const Tensor fp = random_tensor(hp.fine.size(), 16, 11);
    Tensor fq({hq.fine.size(), 16});
    std::normal_distribution<double> noise(0.0, 0.05);
    for (std::size_t s = 0; s < 2; ++s) {
        auto src = hp.patches[s];
        const auto& dst = hq.patches[s];
        ASSERT_EQ(src.size(), dst.size());
        std::shuffle(src.begin(), src.end(), rng);
        for (std::size_t k = 0; k < dst.size(); ++k) {
            owner[dst[k]] = src[k];
            for (std::size_t c = 0; c < 16; ++c) fq(dst[k], c) = fp(src[k], c) + noise(rng);
        }
    }
    const auto c = fine_match({{0, 0, 1.0}, {1, 1, 1.0}}, hp, hq, fp, fq, 0.05);
    std::size_t hits = 0;
    for (const auto& m : c.fine) hits += owner[m.q] == m.p;
    EXPECT_GE(hits, static_cast<std::size_t>(0.95 * hp.fine.size()));
}

TEST(FineMatch, SymmetricAndThresholdMonotone) {
    const auto hp = clustered(2, 50, 12), hq = clustered(2, 50, 13);
    const Tensor fp = random_tensor(hp.fine.size(), 6, 14), fq = random_tensor(hq.fine.size(), 6, 15);
    const std::vector<CoarseMatch> pq{{0, 0, 1.0}, {1, 1, 0.5}, {0, 1, 0.2}};
    std::vector<CoarseMatch> qp;
    for (const auto& m : pq) qp.push_back({m.q, m.p, m.score});
    const auto a = fine_match(pq, hp, hq, fp, fq, 0.0), b = fine_match(qp, hq, hp, fq, fp, 0.0);
    std::set<std::pair<std::size_t, std::size_t>> sa, sb;
    for (const auto& m : a.fine) sa.insert({m.p, m.q});
    for (const auto& m : b.fine) sb.insert({m.q, m.p});
    EXPECT_EQ(sa, sb);
    EXPECT_EQ(sa.size(), a.fine.size());
    std::size_t prev = a.fine.size();
    for (double t : {0.1, 0.3, 0.5, 0.9}) {
        const auto n = fine_match(pq, hp, hq, fp, fq, t).fine.size();
        EXPECT_LE(n, prev);
        prev = n;
    }
}

TEST(TopConfident, OrdersByConfidence) {
    const std::vector<FineMatch> f{{0, 0, 0.2}, {1, 1, 0.9}, {2, 2, 0.5}, {3, 3, 0.9}};
    const auto t = top_confident(f, 3);
    ASSERT_EQ(t.size(), 3u);
    EXPECT_EQ(t[0].p, 1u);
    EXPECT_EQ(t[1].p, 3u);
    EXPECT_EQ(t[2].p, 2u);
}
