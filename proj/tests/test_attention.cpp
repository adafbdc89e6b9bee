#include <gtest/gtest.h>

#include "amr/attention.hpp"

using namespace amr;

namespace {

Tensor random_tensor(std::size_t n, std::size_t d, std::uint64_t seed) {
    Tensor t({n, d});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& v : t.data) v = u(rng);
    return t;
}

Tensor rows_of(const Tensor& t, const std::vector<std::size_t>& idx) {
    Tensor out({idx.size(), t.cols()});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = t(idx[r], c);
    return out;
}

ParameterSet one_way_params(std::size_t width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParameterSet ps;
    init_one_way(ps, "ow", width, 2 * width, rng);
    // larger output gain so the tests see a non-trivial update
    for (auto& v : ps.at("ow/mlp/fc2/w").value.data) v *= 10.0;
    return ps;
}

InteractionConfig small_config(int steps = 2, int layers = 2) {
    InteractionConfig c;
    c.layers = layers;
    c.heads = 2;
    c.width = 4;
    c.ffn_hidden = 6;
    c.steps = steps;
    return c;
}

}  // namespace

TEST(OneWay, SingleAnchor) {
    auto ps = one_way_params(4, 1);
    Graph g;
    const Tensor fa = random_tensor(1, 4, 2), fn = random_tensor(3, 4, 3);
    const Tensor out = one_way_attention(g, ps, "ow", g.input(fa), g.input(fn)).value();
    const Var value = linear(g, ps, "ow/wv", g.input(fa));
    Tensor mixed = fn;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) mixed(i, j) += value.value()(0, j);
    const Tensor m = mlp2(g, ps, "ow/mlp", g.input(mixed)).value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data[i], fn.data[i] + m.data[i], 1e-12);
}

TEST(OneWay, ZeroMlpIsIdentity) {
    auto ps = one_way_params(4, 4);
    for (const char* n : {"ow/mlp/fc1/w", "ow/mlp/fc1/b", "ow/mlp/fc2/w", "ow/mlp/fc2/b"})
        std::fill(ps.at(n).value.data.begin(), ps.at(n).value.data.end(), 0.0);
    Graph g;
    const Tensor fn = random_tensor(5, 4, 5);
    EXPECT_EQ(one_way_attention(g, ps, "ow", g.input(random_tensor(3, 4, 6)), g.input(fn)).value(), fn);
}

TEST(OneWay, HandWorkedTwoByTwo) {
    // wq = wk = wv = I, zero biases; mlp: fc1 = I, fc2 = 2 I, zero biases (ReLU between)
    ParameterSet ps;
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    for (const char* n : {"ow/wq", "ow/wk", "ow/wv", "ow/mlp/fc1"}) {
        ps.add(std::string(n) + "/w", eye);
        ps.add(std::string(n) + "/b", Tensor({2}));
    }
    ps.add("ow/mlp/fc2/w", Tensor({2, 2}, {2, 0, 0, 2}));
    ps.add("ow/mlp/fc2/b", Tensor({2}));
    const Tensor fa({2, 2}, {1.0, 0.0, 0.0, 1.0});
    const Tensor fn({2, 2}, {0.5, -0.5, -1.0, 2.0});
    Graph g;
    const Tensor out = one_way_attention(g, ps, "ow", g.input(fa), g.input(fn)).value();
    const double r = 1.0 / std::sqrt(2.0);
    for (std::size_t i = 0; i < 2; ++i) {
        // scores against anchors e1, e2 are the coordinates of the query row
        const double s0 = fn(i, 0) * r, s1 = fn(i, 1) * r;
        const double w0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), w1 = 1.0 - w0;
        const double m0 = fn(i, 0) + w0, m1 = fn(i, 1) + w1;
        EXPECT_NEAR(out(i, 0), fn(i, 0) + 2.0 * std::max(m0, 0.0), 1e-9);
        EXPECT_NEAR(out(i, 1), fn(i, 1) + 2.0 * std::max(m1, 0.0), 1e-9);
    }
}

TEST(OneWay, RejectsEmptyAnchors) {
    auto ps = one_way_params(4, 7);
    Graph g;
    EXPECT_THROW(one_way_attention(g, ps, "ow", g.input(Tensor({0, 4})), g.input(random_tensor(2, 4, 8))), Error);
}

TEST(OneWay, RowLocality) {
    auto ps = one_way_params(4, 9);
    const Tensor fa = random_tensor(3, 4, 10);
    Tensor fn = random_tensor(5, 4, 11);
    Graph g;
    const Tensor a = one_way_attention(g, ps, "ow", g.input(fa), g.input(fn)).value();
    for (std::size_t c = 0; c < 4; ++c) fn(2, c) += 0.37;
    const Tensor b = one_way_attention(g, ps, "ow", g.input(fa), g.input(fn)).value();
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            if (i == 2) continue;
            EXPECT_EQ(a(i, c), b(i, c));
        }
    EXPECT_NE(a(2, 0), b(2, 0));
}

TEST(OneWay, EquivarianceAndAnchorInvariance) {
    auto ps = one_way_params(4, 12);
    const Tensor fa = random_tensor(4, 4, 13), fn = random_tensor(5, 4, 14);
    const std::vector<std::size_t> pn{3, 1, 4, 0, 2}, pa{2, 0, 3, 1};
    Graph g;
    const Tensor a = one_way_attention(g, ps, "ow", g.input(fa), g.input(fn)).value();
    const Tensor b = one_way_attention(g, ps, "ow", g.input(rows_of(fa, pa)), g.input(rows_of(fn, pn))).value();
    const Tensor pa_rows = rows_of(a, pn);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(b.data[i], pa_rows.data[i], 1e-12);
}

TEST(OneWay, SoftmaxRowsSumToOne) {
    auto ps = one_way_params(4, 15);
    Graph g;
    const Var q = linear(g, ps, "ow/wq", g.input(random_tensor(6, 4, 16)));
    const Var k = linear(g, ps, "ow/wk", g.input(random_tensor(3, 4, 17)));
    const Tensor w = ops::softmax_rows(ops::scale(ops::matmul_nt(q, k), 0.5)).value();
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(w(i, 0) + w(i, 1) + w(i, 2), 1.0, 1e-12);
}

TEST(OneWay, GradCheck) {
    for (auto [a, n] : std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {2, 3}, {4, 2}}) {
        auto ps = one_way_params(4, 18 + a);
        const double err = grad_check(
            [&](Graph& g, std::span<const Var> v) { return one_way_attention(g, ps, "ow", v[0], v[1]); },
            {random_tensor(a, 4, 19), random_tensor(n, 4, 20)}, 1e-5, &ps);
        EXPECT_LT(err, 1e-4);
    }
}

TEST(Vanilla, GradCheck) {
    const auto cfg = small_config();
    for (std::size_t n : {1u, 3u, 5u}) {
        std::mt19937_64 rng(21 + n);
        ParameterSet ps;
        init_vanilla(ps, "v", cfg, rng);
        const double err = grad_check(
            [&](Graph& g, std::span<const Var> v) { return vanilla_attention(g, ps, "v", v[0], v[1], cfg.heads); },
            {random_tensor(n, 4, 22), random_tensor(n + 1, 4, 23)}, 1e-5, &ps);
        EXPECT_LT(err, 1e-4);
    }
}

TEST(Block, NoPriorEqualsVanillaOnly) {
    const auto cfg = small_config();
    std::mt19937_64 rng(24);
    ParameterSet ps;
    init_block(ps, "b", cfg, rng);
    const Tensor fp = random_tensor(5, 4, 25), fq = random_tensor(4, 4, 26);
    Graph g;
    const auto out = interaction_block(g, ps, "b", cfg.heads, g.input(fp), g.input(fq), nullptr);
    const Var sp = vanilla_attention(g, ps, "b/self", g.input(fp), g.input(fp), cfg.heads);
    const Var sq = vanilla_attention(g, ps, "b/self", g.input(fq), g.input(fq), cfg.heads);
    EXPECT_EQ(out.p.value(), vanilla_attention(g, ps, "b/cross", sp, sq, cfg.heads).value());
    EXPECT_EQ(out.q.value(), vanilla_attention(g, ps, "b/cross", sq, sp, cfg.heads).value());
}

TEST(Block, AllAnchorsOrNoAnchorsEqualVanilla) {
    const auto cfg = small_config();
    std::mt19937_64 rng(27);
    ParameterSet ps;
    init_block(ps, "b", cfg, rng);
    Graph g;
    const Var fp = g.input(random_tensor(3, 4, 28)), fq = g.input(random_tensor(4, 4, 29));
    const auto base = interaction_block(g, ps, "b", cfg.heads, fp, fq, nullptr);
    const AnchorPartition all{{0, 1, 2}, {}, {0, 1, 2, 3}, {}};
    const auto a = interaction_block(g, ps, "b", cfg.heads, fp, fq, &all);
    EXPECT_EQ(a.p.value(), base.p.value());
    EXPECT_EQ(a.q.value(), base.q.value());
    const AnchorPartition none{{}, {0, 1, 2}, {}, {0, 1, 2, 3}};
    const auto b = interaction_block(g, ps, "b", cfg.heads, fp, fq, &none);
    EXPECT_EQ(b.p.value(), base.p.value());
    const AnchorPartition one_sided{{0}, {1, 2}, {}, {0, 1, 2, 3}};
    EXPECT_EQ(interaction_block(g, ps, "b", cfg.heads, fp, fq, &one_sided).p.value(), base.p.value());
}

TEST(Block, ThreeSuperpointComposition) {
    const auto cfg = small_config();
    std::mt19937_64 rng(30);
    ParameterSet ps;
    init_block(ps, "b", cfg, rng);
    const AnchorPartition part{{0}, {1, 2}, {1, 2}, {0}};
    Graph g;
    const Var fp = g.input(random_tensor(3, 4, 31)), fq = g.input(random_tensor(3, 4, 32));
    const auto out = interaction_block(g, ps, "b", cfg.heads, fp, fq, &part);

    const auto base = interaction_block(g, ps, "b", cfg.heads, fp, fq, nullptr);
    const Tensor cp = base.p.value(), cq = base.q.value();
    const Tensor op_non = one_way_attention(g, ps, "b/ow_self", g.input(rows_of(cp, {0})), g.input(rows_of(cp, {1, 2}))).value();
    const Tensor oq_non = one_way_attention(g, ps, "b/ow_self", g.input(rows_of(cq, {1, 2})), g.input(rows_of(cq, {0}))).value();
    Tensor op = cp, oq = cq;
    for (std::size_t c = 0; c < 4; ++c) {
        op(1, c) = op_non(0, c);
        op(2, c) = op_non(1, c);
        oq(0, c) = oq_non(0, c);
    }
    const Tensor xp_non = one_way_attention(g, ps, "b/ow_cross", g.input(rows_of(oq, {1, 2})), g.input(rows_of(op, {1, 2}))).value();
    const Tensor xq_non = one_way_attention(g, ps, "b/ow_cross", g.input(rows_of(op, {0})), g.input(rows_of(oq, {0}))).value();
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_NEAR(out.p.value()(0, c), cp(0, c), 1e-12);
        EXPECT_NEAR(out.p.value()(1, c), xp_non(0, c), 1e-9);
        EXPECT_NEAR(out.p.value()(2, c), xp_non(1, c), 1e-9);
        EXPECT_NEAR(out.q.value()(0, c), xq_non(0, c), 1e-9);
        EXPECT_NEAR(out.q.value()(1, c), cq(1, c), 1e-12);
    }
}

TEST(Block, GradCheck) {
    const auto cfg = small_config();
    const AnchorPartition part{{0, 2}, {1, 3}, {1}, {0, 2}};
    for (std::uint64_t seed : {33u, 34u, 35u}) {
        std::mt19937_64 rng(seed);
        ParameterSet ps;
        init_block(ps, "b", cfg, rng);
        const double err = grad_check(
            [&](Graph& g, std::span<const Var> v) {
                const auto out = interaction_block(g, ps, "b", cfg.heads, v[0], v[1], &part);
                return ops::concat_cols({ops::gather_rows(out.p, {0, 1, 2}), out.q});
            },
            {random_tensor(4, 4, seed), random_tensor(3, 4, seed + 10)}, 1e-5, &ps);
        EXPECT_LT(err, 1e-4);
    }
}

TEST(Stack, SingleLayerEqualsBlock) {
    const auto cfg = small_config(2, 1);
    std::mt19937_64 rng(36);
    ParameterSet ps;
    init_step_weights(ps, cfg, rng);
    const AnchorPartition part{{0}, {1, 2}, {0, 1}, {2}};
    Graph g;
    const Var fp = g.input(random_tensor(3, 4, 37)), fq = g.input(random_tensor(3, 4, 38));
    const auto a = run_stack(g, ps, fp, fq, &part, 2, cfg);
    const auto b = interaction_block(g, ps, block_prefix(2, 0), cfg.heads, fp, fq, &part);
    EXPECT_EQ(a.p.value(), b.p.value());
    EXPECT_EQ(a.q.value(), b.q.value());
}

TEST(Stack, DistinctStepsDiffer) {
    const auto cfg = small_config(3, 2);
    std::mt19937_64 rng(39);
    ParameterSet ps;
    init_step_weights(ps, cfg, rng);
    EXPECT_TRUE(ps.contains("step3/block1/ow_cross/mlp/fc2/w"));
    EXPECT_FALSE(ps.contains("step4/block0/self/attn/wq/w"));
    Graph g;
    const Var fp = g.input(random_tensor(4, 4, 40)), fq = g.input(random_tensor(4, 4, 41));
    const auto a = run_stack(g, ps, fp, fq, nullptr, 1, cfg);
    const auto b = run_stack(g, ps, fp, fq, nullptr, 2, cfg);
    EXPECT_NE(a.p.value(), b.p.value());
    EXPECT_THROW(run_stack(g, ps, fp, fq, nullptr, 0, cfg), Error);
    EXPECT_THROW(run_stack(g, ps, fp, fq, nullptr, 4, cfg), Error);
}

TEST(Stack, NonAnchorPermutationEquivariance) {
    const auto cfg = small_config(1, 2);
    std::mt19937_64 rng(42);
    ParameterSet ps;
    init_step_weights(ps, cfg, rng);
    const Tensor fp = random_tensor(5, 4, 43), fq = random_tensor(4, 4, 44);
    const AnchorPartition part{{0, 1}, {2, 3, 4}, {0, 3}, {1, 2}};
    // swap non-anchor rows 2 and 4 of P
    const std::vector<std::size_t> perm{0, 1, 4, 3, 2};
    Graph g;
    const auto a = run_stack(g, ps, g.input(fp), g.input(fq), &part, 1, cfg);
    const auto b = run_stack(g, ps, g.input(rows_of(fp, perm)), g.input(fq), &part, 1, cfg);
    const Tensor expect = rows_of(a.p.value(), perm);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(b.p.value().data[i], expect.data[i], 1e-12);
    for (std::size_t i = 0; i < a.q.value().size(); ++i) EXPECT_NEAR(b.q.value().data[i], a.q.value().data[i], 1e-12);
}
