#include <gtest/gtest.h>

#include <cmath>

#include "capiqa/core/rng.hpp"
#include "capiqa/numerics/attention.hpp"
#include "capiqa/numerics/parameters.hpp"

using namespace capiqa;

namespace {

using TD = Tensor<double>;

TD rand(Shape s, Rng& rng) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return TD(std::move(s), std::move(v));
}

AttentionProjections<double> random_projections(std::size_t d, std::uint64_t seed) {
    ParameterSet<double> ps(seed);
    AttentionProjections<double> p;
    p.wq = ps.add("q.w", {d, d}, Init::normal(0.5));
    p.bq = ps.add("q.b", {d}, Init::normal(0.1));
    p.wk = ps.add("k.w", {d, d}, Init::normal(0.5));
    p.bk = ps.add("k.b", {d}, Init::normal(0.1));
    p.wv = ps.add("v.w", {d, d}, Init::normal(0.5));
    p.bv = ps.add("v.b", {d}, Init::normal(0.1));
    p.wo = ps.add("o.w", {d, d}, Init::normal(0.5));
    p.bo = ps.add("o.b", {d}, Init::normal(0.1));
    return p;
}

}  // namespace

TEST(Attention, SingleKeyReturnsValue) {
    Rng rng(1);
    const auto q = rand({1, 8}, rng), k = rand({1, 8}, rng), v = rand({1, 8}, rng);
    const auto a = multi_head_attention<double>(q, k, v, 2, nullptr);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a[j], v[j], 1e-15);
}

TEST(Attention, EqualValueRowsGiveProjectedValue) {
    Rng rng(2);
    const auto proj = random_projections(8, 3);
    const auto u = rand({1, 8}, rng);
    std::vector<double> rows;
    for (int r = 0; r < 5; ++r) rows.insert(rows.end(), u.data().begin(), u.data().end());
    const TD v({5, 8}, rows);
    const auto a = multi_head_attention(rand({1, 8}, rng), rand({5, 8}, rng), v, 4, &proj);
    // softmax-weighted average of equal rows is the row itself
    const auto expected = linear(linear(u, proj.wv, proj.bv), proj.wo, proj.bo);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(a[j], expected[j], 1e-12);
}

TEST(Attention, TwoKeyHandExample) {
    const TD q({1, 4}, {1, 0, 1, 0});
    const TD k({2, 4}, {1, 1, 0, 0, 0, 0, 2, 0});
    const TD v({2, 4}, {1, 2, 3, 4, -1, 0, 1, 0});
    // logits: q.k0 / 2 = 0.5, q.k1 / 2 = 1.0
    const double w0 = std::exp(0.5) / (std::exp(0.5) + std::exp(1.0));
    const double w1 = 1 - w0;
    const auto a = multi_head_attention<double>(q, k, v, 1, nullptr);
    const double expected[4] = {w0 * 1 + w1 * -1, w0 * 2, w0 * 3 + w1 * 1, w0 * 4};
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a[j], expected[j], 1e-6);
}

TEST(Attention, WeightsAreDistributions) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto proj = random_projections(12, static_cast<std::uint64_t>(trial));
        const auto w = attention_weights(rand({3, 12}, rng), rand({3, 5, 12}, rng), 3, &proj);
        ASSERT_EQ(w.size(), 3u * 3u * 5u);
        for (std::size_t row = 0; row < 9; ++row) {
            double s = 0;
            for (std::size_t r = 0; r < 5; ++r) {
                EXPECT_GE(w[row * 5 + r], 0.0);
                s += w[row * 5 + r];
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Attention, HeadDivisibilityIsConfigError) {
    Rng rng(5);
    EXPECT_THROW(multi_head_attention<double>(rand({1, 6}, rng), rand({2, 6}, rng), rand({2, 6}, rng), 4, nullptr),
                 ConfigError);
}

TEST(Attention, KeyValueRowMismatch) {
    Rng rng(6);
    EXPECT_THROW(multi_head_attention<double>(rand({1, 4}, rng), rand({2, 4}, rng), rand({3, 4}, rng), 1, nullptr),
                 DimensionError);
}

TEST(Attention, BatchedEqualsPerRow) {
    Rng rng(7);
    const auto proj = random_projections(8, 9);
    const auto q = rand({3, 8}, rng);
    const auto kv = rand({3, 4, 8}, rng);
    const auto batched = multi_head_attention(q, kv, kv, 2, &proj);
    for (std::size_t n = 0; n < 3; ++n) {
        const auto qn = narrow(q, n, 1);
        const auto kn = reshape(narrow(kv, n, 1), {4, 8});
        const auto single = multi_head_attention(qn, kn, kn, 2, &proj);
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(batched[n * 8 + j], single[j], 1e-12);
    }
}
