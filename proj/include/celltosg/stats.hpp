#ifndef CELLTOSG_STATS_HPP
#define CELLTOSG_STATS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "common.hpp"

/**
 * @file stats.hpp
 * @brief Rank statistics: midranks, ROC AUC and the Mann-Whitney U test.
 */

namespace celltosg::stats {

/** 1-based midranks of `values` (ties share the average rank). */
inline std::vector<double> midranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

/**
 * Area under the ROC curve for `positive` vs `negative` scores; ties count
 * one half.
 */
inline double auc(std::span<const double> positive, std::span<const double> negative) {
    if (positive.empty() || negative.empty()) {
        throw InputError("auc: both score sets must be non-empty");
    }
    std::vector<double> pooled(positive.begin(), positive.end());
    pooled.insert(pooled.end(), negative.begin(), negative.end());
    const auto ranks = midranks(pooled);
    double rank_sum = 0;
    for (std::size_t i = 0; i < positive.size(); ++i) {
        rank_sum += ranks[i];
    }
    const double np = static_cast<double>(positive.size());
    const double nn = static_cast<double>(negative.size());
    return (rank_sum - np * (np + 1) / 2) / (np * nn);
}

struct MannWhitney {
    /** U statistic of the first group. */
    double u = 0;
    double p_value = 1;
    bool exact = false;
};

/**
 * Two-sided Mann-Whitney U test.
 *
 * When both groups have at most `exact_limit` observations the p-value is
 * the share of all group relabelings whose U lies at least as far from its
 * mean as the observed one. Otherwise the normal approximation with tie
 * correction and continuity correction is used.
 */
inline MannWhitney mann_whitney_u(std::span<const double> x, std::span<const double> y, std::size_t exact_limit = 8) {
    const std::size_t n1 = x.size(), n2 = y.size();
    if (n1 == 0 || n2 == 0) {
        throw InputError("mann_whitney_u: both groups must be non-empty");
    }
    const std::size_t n = n1 + n2;
    std::vector<double> pooled(x.begin(), x.end());
    pooled.insert(pooled.end(), y.begin(), y.end());
    const auto ranks = midranks(pooled);

    const double base = static_cast<double>(n1) * static_cast<double>(n1 + 1) / 2;
    double r1 = 0;
    for (std::size_t i = 0; i < n1; ++i) {
        r1 += ranks[i];
    }

    MannWhitney out;
    out.u = r1 - base;
    const double mean = static_cast<double>(n1) * static_cast<double>(n2) / 2;
    const double observed = std::abs(out.u - mean);

    if (n1 <= exact_limit && n2 <= exact_limit) {
        out.exact = true;
        std::vector<char> pick(n, 0);
        std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(n1), 1);
        std::size_t total = 0, extreme = 0;
        do {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (pick[i]) {
                    s += ranks[i];
                }
            }
            ++total;
            if (std::abs(s - base - mean) >= observed - 1e-9) {
                ++extreme;
            }
        } while (std::prev_permutation(pick.begin(), pick.end()));
        out.p_value = static_cast<double>(extreme) / static_cast<double>(total);
        return out;
    }

    // tie correction
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    double tie_term = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && sorted[j] == sorted[i]) {
            ++j;
        }
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    const double dn = static_cast<double>(n);
    const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 * ((dn + 1) - tie_term / (dn * (dn - 1)));
    if (var <= 0) {
        out.p_value = 1;
        return out;
    }
    const double z = std::max(0.0, observed - 0.5) / std::sqrt(var);
    out.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    return out;
}

} // namespace celltosg::stats

#endif
