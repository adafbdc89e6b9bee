#include <gtest/gtest.h>

#include "amr/data.hpp"
#include "amr/training.hpp"
#include "support.hpp"

using namespace amr;

namespace {

PipelineConfig small_config(int K) {
    PipelineConfig c;
    c.fine_voxel = 0.1;
    c.super_voxel = 0.6;
    c.neighbors = 8;
    c.encoder = {16, 8, 16};
    c.interaction = {2, 2, 16, 16, K};
    c.top_k = 16;
    c.inlier_radius = 0.2;
    c.overlap_radius = 0.2;
    return c;
}

TrainConfig small_train(int K, std::uint64_t seed, int epochs) {
    TrainConfig t;
    t.schedule = {1000, K};
    t.seed = seed;
    t.epochs = epochs;
    t.learning_rate = 1e-2;
    t.overlap_radius = 0.2;
    t.max_patch_pairs = 8;
    t.max_patch_points = 24;
    return t;
}

const TrainingPair& fixture_pair() {
    static const TrainingPair pair = [] {
        SceneSpec s;
        s.seed = 31;
        s.points_per_cloud = 6000;
        s.target_overlap = 0.4;
        const auto g = generate_pair(s);
        return make_training_pair("fixture", small_config(1), g.source, g.target, g.record.gt,
                                  synth_prior(g.record.gt, 0.3, 0.5, 1), 0.2);
    }();
    return pair;
}

Tensor random_tensor(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    Tensor t({n, d});
    std::normal_distribution<double> u;
    for (auto& v : t.data) v = u(rng);
    return t;
}

double circle_value(const Tensor& p, const Tensor& q, const Eigen::MatrixXd& ov) {
    Graph g;
    return overlap_circle_loss(g.input(p), g.input(q), ov, {}).value().data[0];
}

}  // namespace

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig t;
    EXPECT_THROW(t.validate(), Error);
    t.seed = 3;
    EXPECT_NO_THROW(t.validate());
    TrainConfig back;
    apply_json(back, to_json(t));
    EXPECT_EQ(to_json(back), to_json(t));
    EXPECT_THROW(apply_json(back, {{"epoch", 1}}), Error);
    apply_json(back, {{"momentum", 1.0}});
    EXPECT_THROW(back.validate(), Error);
    EXPECT_EQ(t.circle.pos_margin, 0.1);
    EXPECT_EQ(t.circle.neg_margin, 1.4);
    EXPECT_EQ(t.circle.log_scale, 24.0);
}

TEST(CircleLoss, PositivesCloseBeatSwapped) {
    const Tensor p({1, 3}, {1, 0, 0});
    const Tensor good({2, 3}, {1, 0, 0, -1, 0, 0});
    const Tensor swapped({2, 3}, {-1, 0, 0, 1, 0, 0});
    Eigen::MatrixXd ov(1, 2);
    ov << 1.0, 0.0;
    const double lg = circle_value(p, good, ov), ls = circle_value(p, swapped, ov);
    EXPECT_LT(lg, ls);
    EXPECT_NEAR(lg, std::log(2.0) / 24.0, 1e-9);
    EXPECT_GE(lg, 0.0);
}

TEST(CircleLoss, NoPositivesIsZero) {
    std::mt19937_64 rng(1);
    Graph g;
    bool had = true;
    const Var l = overlap_circle_loss(g.input(random_tensor(4, 5, rng)), g.input(random_tensor(3, 5, rng)),
                                      Eigen::MatrixXd::Zero(4, 3), {}, &had);
    EXPECT_EQ(l.value().data[0], 0.0);
    EXPECT_FALSE(had);
    EXPECT_THROW(circle_value(random_tensor(4, 5, rng), random_tensor(3, 5, rng), Eigen::MatrixXd::Ones(3, 4)), Error);
}

TEST(CircleLoss, HigherOverlapWeighsMore) {
    // a positive at fixed distance costs more when its overlap weight is larger
    const Tensor p({1, 2}, {1, 0});
    const Tensor q({2, 2}, {0, 1, -1, 0});
    Eigen::MatrixXd lo(1, 2), hi(1, 2);
    lo << 0.2, 0.0;
    hi << 0.9, 0.0;
    EXPECT_LT(circle_value(p, q, lo), circle_value(p, q, hi));
}

TEST(CircleLoss, GradCheck) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (const auto& [n, m, d] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{{3, 4, 5}, {6, 2, 3}, {5, 5, 8}}) {
        Eigen::MatrixXd ov(n, m);
        for (Eigen::Index i = 0; i < ov.size(); ++i) ov.data()[i] = u(rng) < 0.4 ? u(rng) : 0.0;
        ov(0, 0) = 0.7;
        const double err = grad_check(
            [&](Graph&, std::span<const Var> x) {
                CircleLossParams prm;
                prm.log_scale = 4.0;
                return overlap_circle_loss(x[0], x[1], ov, prm);
            },
            {random_tensor(n, d, rng), random_tensor(m, d, rng)});
        EXPECT_LT(err, 1e-4) << n << "x" << m << "x" << d;
    }
}

TEST(MatchingLoss, ConfidentTrueMatchesGiveZero) {
    const std::size_t m = 4;
    Graph g;
    Tensor logits = Tensor::matrix(m, m);
    PatchScores ps{{}, {}, {}};
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = (i + 1) % m;
        logits(i, j) = 60.0;
        ps.row_labels.push_back(j);
    }
    ps.col_labels.resize(m);
    for (std::size_t i = 0; i < m; ++i) ps.col_labels[(i + 1) % m] = i;
    ps.logits = g.input(logits);
    const Var l = point_matching_loss({ps}, g.input(Tensor({1}, {0.0})));
    EXPECT_NEAR(l.value().data[0], 0.0, 1e-20);
}

TEST(MatchingLoss, UniformGivesLogBins) {
    for (std::size_t m : {1u, 3u, 7u}) {
        Graph g;
        PatchScores ps{g.input(Tensor::matrix(m, m)), std::vector<std::size_t>(m, m), std::vector<std::size_t>(m, 0)};
        ps.row_labels[0] = 0;
        const Var l = point_matching_loss({ps}, g.input(Tensor({1}, {0.0})));
        EXPECT_NEAR(l.value().data[0], std::log(static_cast<double>(m) + 1.0), 1e-12);
    }
}

TEST(MatchingLoss, EmptyLabelsGiveZero) {
    Graph g;
    EXPECT_EQ(point_matching_loss({}, g.input(Tensor({1}, {0.3}))).value().data[0], 0.0);
    PatchScores bad{g.input(Tensor::matrix(2, 2)), {0, 5}, {0, 0}};
    EXPECT_THROW(point_matching_loss({bad}, g.input(Tensor({1}, {0.0}))), Error);
}

TEST(MatchingLoss, GradCheck) {
    std::mt19937_64 rng(3);
    for (const auto& [m, n] : std::vector<std::pair<std::size_t, std::size_t>>{{2, 3}, {4, 4}, {5, 2}}) {
        std::vector<std::size_t> rows(m), cols(n);
        for (std::size_t i = 0; i < m; ++i) rows[i] = rng() % (n + 1);
        for (std::size_t j = 0; j < n; ++j) cols[j] = rng() % (m + 1);
        const double err = grad_check(
            [&](Graph&, std::span<const Var> x) {
                return point_matching_loss({{x[0], rows, cols}, {x[1], {0, 1}, {1, 2}}}, x[2]);
            },
            {random_tensor(m, n, rng), random_tensor(2, 2, rng), random_tensor(1, 1, rng)});
        EXPECT_LT(err, 1e-4) << m << "x" << n;
    }
}

TEST(Labels, MutualNearestMatchesBruteForce) {
    const auto& pair = fixture_pair();
    const auto& hp = pair.ctx.hp;
    const auto& hq = pair.ctx.hq;
    std::vector<std::pair<std::size_t, std::size_t>> expect;
    const auto moved = pair.gt.apply(hp.fine.points);
    auto nearest = [](const Vec3& x, const std::vector<Vec3>& pts) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < pts.size(); ++k)
            if ((pts[k] - x).squaredNorm() < (pts[best] - x).squaredNorm()) best = k;
        return best;
    };
    for (std::size_t i = 0; i < moved.size(); ++i) {
        const std::size_t j = nearest(moved[i], hq.fine.points);
        if ((hq.fine.points[j] - moved[i]).norm() <= 0.2 && nearest(hq.fine.points[j], moved) == i) expect.emplace_back(i, j);
    }
    EXPECT_FALSE(expect.empty());
    EXPECT_EQ(pair.labels.fine, expect);
    EXPECT_EQ(pair.labels.patch_overlaps, patch_overlap_matrix(hp, hq, pair.gt, 0.2));
}

TEST(Sample, TopLevelPriorIsGroundTruth) {
    const auto& pair = fixture_pair();
    const DegradationSchedule s{3, 3};
    int seen = 0;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto smp = make_training_sample(pair, s, seed);
        EXPECT_EQ(smp.prior.tau, smp.prior.group);
        if (smp.prior.tau == 3) {
            ++seen;
            EXPECT_EQ(smp.prior.transform, pair.gt);
        }
    }
    EXPECT_GT(seen, 0);
}

TEST(Sample, RoutingAndDeterminism) {
    const auto& pair = fixture_pair();
    const DegradationSchedule s{1000, 5};
    std::vector<int> per_group(6, 0);
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const auto smp = make_training_sample(pair, s, seed);
        EXPECT_EQ(smp.prior.group, group_index(smp.prior.tau, 1000, 5));
        EXPECT_EQ(smp.prior.transform, degrade(*pair.prior, pair.gt, smp.prior.tau, 1000));
        EXPECT_EQ(smp.labels, &pair.labels);
        EXPECT_EQ(make_training_sample(pair, s, seed).prior.tau, smp.prior.tau);
        ++per_group[static_cast<std::size_t>(smp.prior.group)];
    }
    for (int k = 1; k <= 5; ++k) EXPECT_GT(per_group[static_cast<std::size_t>(k)], 60);
}

TEST(Sample, MissingPriorWarnsAndUsesIdentity) {
    TrainingPair pair = fixture_pair();
    pair.prior.reset();
    testing::internal::CaptureStderr();
    const auto smp = make_training_sample(pair, {10, 1}, 4);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_NE(err.find("warning"), std::string::npos);
    EXPECT_EQ(smp.prior.transform, degrade(RigidTransform::identity(), pair.gt, smp.prior.tau, 10));
}

TEST(SampleLoss, TotalIsSumOfNonNegativeTerms) {
    const auto& pair = fixture_pair();
    auto pipe = RefinementPipeline::create(small_config(3), 5);
    const auto tc = small_train(3, 5, 1);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto smp = make_training_sample(pair, tc.schedule, seed);
        Graph g;
        SampleLoss parts;
        const Var l = detail::sample_loss_graph(g, pipe, pair, smp, tc, &parts);
        EXPECT_EQ(l.value().data[0], parts.loss_oc + parts.loss_p);
        EXPECT_GT(parts.loss_oc, 0.0);
        EXPECT_GT(parts.loss_p, 0.0);
        EXPECT_EQ(evaluate_sample_loss(pipe, pair, smp, tc).total(), parts.total());
    }
}

TEST(Train, SmokeLossDecreases) {
    // loss on a fixed degraded sample, before and after a short run on the same pair
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto tc = small_train(3, seed, 6);
        const auto pc = small_config(3);
        const auto smp = make_training_sample(fixture_pair(), tc.schedule, 1000 + seed);
        auto before = RefinementPipeline::create(pc, seed);
        const double l0 = evaluate_sample_loss(before, fixture_pair(), smp, tc).total();
        auto res = train({fixture_pair()}, tc, pc);
        const double l1 = evaluate_sample_loss(res.pipeline, fixture_pair(), smp, tc).total();
        decreased += l1 < l0;
        for (const auto& sl : res.step_losses) EXPECT_TRUE(std::isfinite(sl.total()));
    }
    EXPECT_GE(decreased, 9);
}

TEST(Train, GroupIsolation) {
    const auto pc = small_config(3);
    const auto tc = small_train(3, 7, 1);
    const auto res = train({fixture_pair()}, tc, pc);
    ASSERT_EQ(res.log.size(), 1u);
    const int group = res.log[0].group;
    const auto init = RefinementPipeline::create(pc, 7);
    bool encoder_moved = false, own_moved = false;
    for (const auto& [name, p] : res.pipeline.params) {
        const bool same = p.value == init.params.at(name).value;
        if (name.rfind("encoder/", 0) == 0) encoder_moved = encoder_moved || !same;
        for (int k = 1; k <= 3; ++k) {
            if (name.rfind(step_prefix(k) + "/", 0) != 0) continue;
            if (k == group) own_moved = own_moved || !same;
            else EXPECT_TRUE(same) << name;
        }
    }
    EXPECT_TRUE(encoder_moved);
    EXPECT_TRUE(own_moved);
}

TEST(Train, SingleStepEqualsPlainTraining) {
    const auto pc = small_config(1);
    const auto tc = small_train(1, 8, 2);
    const std::vector<TrainingPair> data{fixture_pair(), fixture_pair()};
    const auto res = train(data, tc, pc);

    auto pipe = RefinementPipeline::create(pc, 8);
    std::map<std::string, Tensor> vel;
    for (const auto& [name, p] : pipe.params) vel.emplace(name, Tensor(p.value.shape));
    std::mt19937_64 rng(8 ^ 0x9E3779B97F4A7C15ull);
    std::vector<std::size_t> order(2);
    for (int e = 0; e < 2; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i : order) {
            pipe.params.zero_grad();
            const auto smp = make_training_sample(data[i], tc.schedule, rng());
            Graph g;
            g.backward(ops::scale(detail::sample_loss_graph(g, pipe, data[i], smp, tc, nullptr), 1.0));
            double n2 = 0;
            for (const auto& [name, p] : pipe.params)
                for (double v : p.grad.data) n2 += v * v;
            const double clip = std::sqrt(n2) > tc.grad_clip ? tc.grad_clip / std::sqrt(n2) : 1.0;
            for (auto& [name, p] : pipe.params)
                for (std::size_t k = 0; k < p.value.size(); ++k) {
                    vel[name].data[k] = tc.momentum * vel[name].data[k] + clip * p.grad.data[k];
                    p.value.data[k] -= tc.learning_rate * vel[name].data[k];
                }
        }
    }
    pipe.params.zero_grad();
    EXPECT_TRUE(pipe.params == res.pipeline.params);
}

TEST(Train, DeterministicCurves) {
    const auto pc = small_config(3);
    const auto tc = small_train(3, 9, 2);
    const std::vector<TrainingPair> data{fixture_pair()};
    std::vector<std::string> lines;
    const auto a = train(data, tc, pc, [&](const LossRecord& r) { lines.push_back(to_json(r).dump()); });
    const auto b = train(data, tc, pc);
    ASSERT_EQ(a.log.size(), b.log.size());
    ASSERT_EQ(lines.size(), a.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(to_json(a.log[i]).dump(), to_json(b.log[i]).dump());
    EXPECT_TRUE(a.pipeline.params == b.pipeline.params);
}

TEST(Train, RejectsMismatchedSchedule) {
    EXPECT_THROW(train({fixture_pair()}, small_train(2, 1, 1), small_config(3)), Error);
    EXPECT_THROW(train({}, small_train(3, 1, 1), small_config(3)), Error);
    auto tc = small_train(3, 1, 1);
    tc.seed.reset();
    EXPECT_THROW(train({fixture_pair()}, tc, small_config(3)), Error);
}

TEST(Train, DivergenceIsReported) {
    auto tc = small_train(1, 10, 3);
    tc.learning_rate = 1e200;
    tc.grad_clip = 0;
    EXPECT_THROW(train({fixture_pair()}, tc, small_config(1)), TrainingDivergence);
}
