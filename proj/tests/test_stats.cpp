#include <gtest/gtest.h>

#include <celltosg/stats.hpp>

#include "oracles.hpp"

using namespace celltosg;

namespace {

std::vector<double> draw(Rng& rng, std::size_t n, bool ties) {
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i) {
        v.push_back(ties ? static_cast<double>(celltosg::detail::uniform_index(rng, 4))
                         : celltosg::detail::standard_normal(rng));
    }
    return v;
}

} // namespace

TEST(Midranks, TiesShareAverageRank) {
    const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
    EXPECT_EQ(stats::midranks(v), (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
}

TEST(Auc, PairCountingConvention) {
    const std::vector<double> pos{0.9, 0.5}, neg{0.5, 0.1};
    // pairs: (0.9>0.5) (0.9>0.1) (0.5=0.5 half) (0.5>0.1) -> 3.5 / 4
    EXPECT_DOUBLE_EQ(stats::auc(pos, neg), 0.875);
    const std::vector<double> same{0.3, 0.3};
    EXPECT_DOUBLE_EQ(stats::auc(same, same), 0.5);
}

TEST(MannWhitney, OneTwoVersusThreeFour) {
    const std::vector<double> x{1, 2}, y{3, 4};
    const auto r = stats::mann_whitney_u(x, y);
    EXPECT_EQ(r.u, 0.0);
    EXPECT_TRUE(r.exact);
    EXPECT_NEAR(r.p_value, 2.0 / 6.0, 1e-12);
    EXPECT_NEAR(r.p_value, 0.3333, 1e-4);
}

TEST(MannWhitney, IdenticalGroupsGiveOne) {
    const std::vector<double> x{1, 2, 3}, y{1, 2, 3};
    EXPECT_DOUBLE_EQ(stats::mann_whitney_u(x, y).p_value, 1.0);
    const std::vector<double> big(30, 2.0);
    EXPECT_DOUBLE_EQ(stats::mann_whitney_u(big, big).p_value, 1.0);
}

TEST(MannWhitney, UMatchesPairCount) {
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        const auto x = draw(rng, 1 + celltosg::detail::uniform_index(rng, 20), t % 2 == 0);
        const auto y = draw(rng, 1 + celltosg::detail::uniform_index(rng, 20), t % 2 == 0);
        EXPECT_NEAR(stats::mann_whitney_u(x, y).u, support::pairwise_u(x, y), 1e-9);
    }
}

TEST(MannWhitney, ExactAgreesWithEnumerationUpToEight) {
    Rng rng(2);
    for (std::size_t n1 = 1; n1 <= 8; ++n1) {
        for (std::size_t n2 = 1; n2 <= 8; ++n2) {
            for (bool ties : {false, true}) {
                const auto x = draw(rng, n1, ties), y = draw(rng, n2, ties);
                const auto r = stats::mann_whitney_u(x, y);
                ASSERT_TRUE(r.exact);
                EXPECT_NEAR(r.p_value, support::exact_mwu_p(x, y), 1e-12) << n1 << "x" << n2;
            }
        }
    }
}

TEST(MannWhitney, NormalApproximationIsCloseToExact) {
    Rng rng(3);
    const auto x = draw(rng, 9, false), y = draw(rng, 9, false);
    std::vector<double> shifted = y;
    for (auto& v : shifted) {
        v += 0.8;
    }
    const auto approx = stats::mann_whitney_u(x, shifted);
    EXPECT_FALSE(approx.exact);
    const auto exact = stats::mann_whitney_u(x, shifted, 9);
    EXPECT_TRUE(exact.exact);
    EXPECT_NEAR(approx.p_value, exact.p_value, 0.02);
}

TEST(MannWhitney, MonotoneUnderShift) {
    Rng rng(4);
    for (std::size_t n : {5u, 20u}) {
        const auto x = draw(rng, n, false);
        double prev = 2;
        // start from identical groups and move one upward
        for (int step = 0; step < 30; ++step) {
            std::vector<double> moved = x;
            for (auto& v : moved) {
                v += 0.1 * step;
            }
            const double p = stats::mann_whitney_u(x, moved).p_value;
            EXPECT_LE(p, prev + 1e-12);
            EXPECT_GT(p, 0.0);
            EXPECT_LE(p, 1.0);
            prev = p;
        }
    }
}

TEST(MannWhitney, EmptyGroupIsAnError) {
    const std::vector<double> x{1}, none;
    EXPECT_THROW(stats::mann_whitney_u(x, none), InputError);
}
