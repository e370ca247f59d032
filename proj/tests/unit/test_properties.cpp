#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capiqa/core/rng.hpp"
#include "capiqa/datagen.hpp"
#include "capiqa/metrics.hpp"
#include "oracles.hpp"

using namespace capiqa;
using namespace capiqa::testing;

namespace {

bool degenerate(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
}

// n in [3,30]; half the instances draw from a small integer alphabet so ties
// are common.
ScorePairs random_pairs(Rng& rng) {
    for (;;) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(3, 30));
        const bool ties = rng.uniform() < 0.5;
        ScorePairs p;
        for (std::size_t i = 0; i < n; ++i) {
            if (ties) {
                p.truth.push_back(static_cast<double>(rng.uniform_int(0, 4)));
                p.pred.push_back(static_cast<double>(rng.uniform_int(0, 4)));
            } else {
                p.truth.push_back(rng.uniform(0, 4));
                p.pred.push_back(rng.uniform(-1, 5));
            }
        }
        if (!degenerate(p.truth) && !degenerate(p.pred)) return p;
    }
}

}  // namespace

TEST(MetricProperties, MatchBruteForceOracles) {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto p = random_pairs(rng);
        ASSERT_NEAR(pearson(p), oracle_pearson(p.truth, p.pred), 1e-10) << trial;
        ASSERT_NEAR(spearman(p), oracle_spearman(p.truth, p.pred), 1e-10) << trial;
        ASSERT_NEAR(kendall_tau_b(p), oracle_kendall(p.truth, p.pred), 1e-10) << trial;
    }
}

TEST(MetricProperties, RangeAndOverallIdentity) {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto rep = evaluate(random_pairs(rng));
        for (double v : {rep.r, rep.rho, rep.tau}) {
            ASSERT_GE(v, -1.0);
            ASSERT_LE(v, 1.0);
        }
        ASSERT_EQ(rep.s, std::abs(rep.r) + std::abs(rep.rho) + std::abs(rep.tau));
    }
}

TEST(MetricProperties, JointPermutationInvariance) {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const auto p = random_pairs(rng);
        std::vector<std::size_t> perm(p.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = perm.size(); i > 1; --i) {
            std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        }
        ScorePairs q;
        for (auto i : perm) {
            q.truth.push_back(p.truth[i]);
            q.pred.push_back(p.pred[i]);
        }
        ASSERT_NEAR(pearson(p), pearson(q), 1e-12);
        ASSERT_NEAR(spearman(p), spearman(q), 1e-12);
        ASSERT_NEAR(kendall_tau_b(p), kendall_tau_b(q), 1e-12);
    }
}

TEST(MetricProperties, SwapSymmetry) {
    Rng rng(13);
    for (int trial = 0; trial < 300; ++trial) {
        const auto p = random_pairs(rng);
        const ScorePairs q{p.pred, p.truth};
        ASSERT_NEAR(pearson(p), pearson(q), 1e-12);
        ASSERT_NEAR(spearman(p), spearman(q), 1e-12);
        ASSERT_EQ(kendall_tau_b(p), kendall_tau_b(q));
    }
}

TEST(MetricProperties, MonotoneAndAffineInvariance) {
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const auto p = random_pairs(rng);
        ScorePairs mono{p.truth, {}}, affine{p.truth, {}};
        for (double v : p.pred) {
            mono.pred.push_back(std::exp(v) + v * v * v);
            affine.pred.push_back(3.5 * v + 2.0);
        }
        ASSERT_EQ(spearman(p), spearman(mono));
        ASSERT_EQ(kendall_tau_b(p), kendall_tau_b(mono));
        ASSERT_NEAR(pearson(p), pearson(affine), 1e-12);
    }
}

TEST(OracleProperties, NonIncreasingInEachDegradation) {
    Rng rng(23);
    for (int trial = 0; trial < 1000; ++trial) {
        DegradationParams base;
        base.dose = rng.uniform(0.01, 1.0);
        base.streak_count = static_cast<std::size_t>(rng.uniform_int(0, 4));
        base.streak_amplitude = rng.uniform(0, 0.6);
        base.blur_sigma = rng.uniform(0, 2.5);
        const double s = oracle_score(base);
        ASSERT_GE(s, 0.0);
        ASSERT_LE(s, 4.0);

        auto noisier = base;
        noisier.dose = base.dose * rng.uniform(0.1, 1.0);  // lower dose, larger sigma
        ASSERT_LE(oracle_score(noisier), s);
        auto streakier = base;
        streakier.streak_amplitude += rng.uniform(0, 0.3);
        ASSERT_LE(oracle_score(streakier), s);
        auto blurrier = base;
        blurrier.blur_sigma += rng.uniform(0, 1.0);
        ASSERT_LE(oracle_score(blurrier), s);
    }
}

TEST(OracleProperties, StrictlyDecreasingBeforeSaturation) {
    DegradationParams p;
    p.dose = 1.0;
    double previous = oracle_score(p);
    for (double sigma0 = 0.021; sigma0 < 0.1; sigma0 += 0.001) {
        p.sigma0 = sigma0;
        const double s = oracle_score(p);
        ASSERT_LT(s, previous);
        previous = s;
    }
}
