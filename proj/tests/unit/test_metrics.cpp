#include <gtest/gtest.h>

#include <cmath>

#include "capiqa/metrics.hpp"
#include "oracles.hpp"

using namespace capiqa;
using namespace capiqa::testing;

TEST(Pearson, AffineAndAntisymmetric) {
    const std::vector<double> y{0.3, 1.7, 2.2, 3.9, 1.1};
    std::vector<double> up, down;
    for (double v : y) {
        up.push_back(2.5 * v - 7);
        down.push_back(-v);
    }
    EXPECT_NEAR(pearson({y, up}), 1.0, 1e-15);
    EXPECT_NEAR(pearson({y, down}), -1.0, 1e-15);
}

TEST(Pearson, MatchesDirectDefinition) {
    const std::vector<double> y{1, 2, 3, 5}, p{2, 1, 4, 5};
    EXPECT_NEAR(pearson({y, p}), oracle_pearson(y, p), 1e-12);
    // deviation sums: cross 8, squares 8.75 and 10
    EXPECT_NEAR(pearson({y, p}), 8.0 / std::sqrt(87.5), 1e-12);
}

TEST(Pearson, ZeroVarianceIsUndefined) {
    EXPECT_THROW(pearson({{1, 2, 3}, {4, 4, 4}}), UndefinedCorrelation);
    EXPECT_THROW(pearson({{1, 1}, {1, 2}}), UndefinedCorrelation);
}

TEST(Spearman, HandExample) { EXPECT_NEAR(spearman({{1, 2, 3}, {3, 1, 2}}), -0.5, 1e-15); }

TEST(Spearman, StrictlyIncreasingTransformInvariance) {
    const std::vector<double> y{0.5, 2.0, 1.0, 3.5, 2.5, 0.1};
    const std::vector<double> p{0.7, 1.9, 1.2, 3.0, 3.3, -0.4};
    std::vector<double> e;
    for (double v : p) e.push_back(std::exp(3 * v));
    EXPECT_EQ(spearman({y, p}), spearman({y, e}));
}

TEST(Spearman, TiesUseAverageRankPearson) {
    const double rho = spearman({{1, 1, 2}, {1, 2, 3}});
    EXPECT_NEAR(rho, oracle_pearson({1.5, 1.5, 3}, {1, 2, 3}), 1e-12);
    EXPECT_NEAR(rho, std::sqrt(3.0) / 2.0, 1e-12);
}

TEST(Spearman, AllEqualIsUndefined) { EXPECT_THROW(spearman({{2, 2, 2}, {1, 2, 3}}), UndefinedCorrelation); }

TEST(AverageRanks, TieBlocks) {
    EXPECT_EQ(average_ranks(std::vector<double>{10, 20, 10, 30, 20, 20}),
              (std::vector<double>{1.5, 4, 1.5, 6, 4, 4}));
}

TEST(Kendall, Orderings) {
    EXPECT_EQ(kendall_tau_b({{1, 2, 3, 4}, {10, 20, 30, 40}}), 1.0);
    EXPECT_EQ(kendall_tau_b({{1, 2, 3, 4}, {4, 3, 2, 1}}), -1.0);
}

TEST(Kendall, TieCorrectedHandExample) {
    EXPECT_NEAR(kendall_tau_b({{1, 1, 2}, {1, 2, 3}}), 2.0 / std::sqrt(6.0), 1e-12);
}

TEST(Kendall, PairsTiedOnBothSidesCountNowhere) {
    // pair (0,1) tied in both; P = 5, Q = 0, no one-sided ties
    EXPECT_NEAR(kendall_tau_b({{1, 1, 2, 3}, {5, 5, 6, 7}}), 1.0, 1e-15);
}

TEST(Kendall, OneSideFullyTiedIsUndefined) {
    EXPECT_THROW(kendall_tau_b({{1, 2, 3}, {0, 0, 0}}), UndefinedCorrelation);
}

TEST(Overall, ReportedTestRow) { EXPECT_NEAR(overall(0.9866, 0.9775, 0.8949), 2.8590, 1e-12); }

TEST(Overall, Bounds) {
    EXPECT_EQ(overall(1, 1, 1), 3.0);
    EXPECT_EQ(overall(-1, 0, 0), 1.0);
}

TEST(ScorePairs, Preconditions) {
    EXPECT_THROW(pearson({{1, 2, 3}, {1, 2}}), DimensionError);
    EXPECT_THROW(spearman({{1}, {1}}), UndefinedCorrelation);
    EXPECT_THROW(kendall_tau_b({{1, NAN}, {1, 2}}), NumericalError);
}

TEST(Evaluate, PerfectAgreementAndReportJson) {
    const auto rep = evaluate({{0.5, 1.5, 2.5, 3.5}, {0.4, 1.6, 2.4, 3.6}});
    EXPECT_EQ(rep.n, 4u);
    // ranks agree exactly; r = 5.2 / sqrt(5 * 5.44)
    EXPECT_NEAR(rep.s, 2.0 + 5.2 / std::sqrt(27.2), 1e-12);
    EXPECT_EQ(rep.s, std::abs(rep.r) + std::abs(rep.rho) + std::abs(rep.tau));
    const auto j = to_json(rep);
    for (const char* key : {"n", "pearson", "spearman", "kendall", "overall"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j.size(), 5u);
}

TEST(Significant, TenDigits) {
    EXPECT_EQ(significant(2.85901234567891), 2.859012346);
    EXPECT_EQ(significant(-0.000123456789012), -0.0001234567890);
}
