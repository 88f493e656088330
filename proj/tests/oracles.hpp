#ifndef CELLTOSG_TESTS_ORACLES_HPP
#define CELLTOSG_TESTS_ORACLES_HPP

// Slow reference computations used by the unit tests and the acceptance
// binary. None of them share code with the library.

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <utility>
#include <vector>

namespace support {

/** U of x against y by counting pairs, ties worth one half. */
inline double pairwise_u(const std::vector<double>& x, const std::vector<double>& y) {
    double u = 0;
    for (double a : x) {
        for (double b : y) {
            u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
        }
    }
    return u;
}

/**
 * Exact two-sided permutation p-value: the share of all ways to relabel the
 * pooled values into groups of the original sizes whose U lies at least as
 * far from n1*n2/2 as the observed U.
 */
inline double exact_mwu_p(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> pooled(x);
    pooled.insert(pooled.end(), y.begin(), y.end());
    const unsigned n = static_cast<unsigned>(pooled.size());
    const double centre = static_cast<double>(x.size() * y.size()) / 2;
    const double observed = std::abs(pairwise_u(x, y) - centre);
    std::size_t total = 0, extreme = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != x.size()) {
            continue;
        }
        std::vector<double> a, b;
        for (unsigned i = 0; i < n; ++i) {
            ((mask >> i) & 1u ? a : b).push_back(pooled[i]);
        }
        ++total;
        if (std::abs(pairwise_u(a, b) - centre) >= observed - 1e-9) {
            ++extreme;
        }
    }
    return static_cast<double>(extreme) / static_cast<double>(total);
}

/**
 * Star pruning by exhaustive search. `w` is a symmetric weight matrix with 0
 * meaning no edge. A leaf is a degree-1 node whose neighbor has degree at
 * least 2. For each hub with more than `eps` leaves, every eps-subset of its
 * leaves is scored by (number significant, total weight, then the
 * lexicographically smallest id list) and the best subset survives.
 * Returns the removed nodes.
 */
inline std::set<std::size_t> brute_force_prune(const std::vector<std::vector<double>>& w, const std::vector<bool>& significant,
                                               std::size_t eps) {
    const std::size_t n = w.size();
    std::vector<std::size_t> deg(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            deg[i] += (i != j && w[i][j] != 0);
        }
    }
    std::map<std::size_t, std::vector<std::size_t>> leaves;
    for (std::size_t i = 0; i < n; ++i) {
        if (deg[i] != 1) {
            continue;
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i && w[i][j] != 0 && deg[j] >= 2) {
                leaves[j].push_back(i);
            }
        }
    }
    std::set<std::size_t> removed;
    for (const auto& [hub, ls] : leaves) {
        if (ls.size() <= eps) {
            continue;
        }
        const unsigned k = static_cast<unsigned>(ls.size());
        std::uint32_t best = 0;
        bool have = false;
        std::size_t best_sig = 0;
        double best_w = 0;
        std::vector<std::size_t> best_ids;
        for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
            if (static_cast<std::size_t>(std::popcount(mask)) != eps) {
                continue;
            }
            std::size_t sig = 0;
            double tw = 0;
            std::vector<std::size_t> ids;
            for (unsigned b = 0; b < k; ++b) {
                if ((mask >> b) & 1u) {
                    sig += significant[ls[b]];
                    tw += w[hub][ls[b]];
                    ids.push_back(ls[b]);
                }
            }
            const bool better = !have || sig > best_sig || (sig == best_sig && tw > best_w) ||
                                (sig == best_sig && tw == best_w && ids < best_ids);
            if (better) {
                have = true;
                best = mask;
                best_sig = sig;
                best_w = tw;
                best_ids = ids;
            }
        }
        for (unsigned b = 0; b < k; ++b) {
            if (!((best >> b) & 1u)) {
                removed.insert(ls[b]);
            }
        }
    }
    return removed;
}

/**
 * Dense attention: the full M x M score matrix, masked to the directed PPI
 * pairs, normalized per source row. Returns the weight of each listed edge.
 */
template <typename Mat>
std::vector<double> dense_attention(const Mat& z, const Mat& wq, const Mat& wk,
                                    const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
    const auto m = static_cast<std::size_t>(z.rows());
    const auto d = static_cast<std::size_t>(z.cols());
    std::vector<std::vector<double>> q(m, std::vector<double>(d, 0.0)), k = q;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            for (std::size_t r = 0; r < d; ++r) {
                q[i][c] += z(static_cast<long>(i), static_cast<long>(r)) * wq(static_cast<long>(r), static_cast<long>(c));
                k[i][c] += z(static_cast<long>(i), static_cast<long>(r)) * wk(static_cast<long>(r), static_cast<long>(c));
            }
        }
    }
    std::vector<std::vector<double>> mask(m, std::vector<double>(m, 0.0));
    for (const auto& [a, b] : edges) {
        mask[a][b] = 1.0;
    }
    std::vector<std::vector<double>> att(m, std::vector<double>(m, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) {
                s += q[i][c] * k[j][c];
            }
            att[i][j] = mask[i][j] * std::exp(s / std::sqrt(static_cast<double>(d)));
            total += att[i][j];
        }
        for (std::size_t j = 0; j < m && total > 0; ++j) {
            att[i][j] /= total;
        }
    }
    std::vector<double> out;
    for (const auto& [a, b] : edges) {
        out.push_back(att[a][b]);
    }
    return out;
}

} // namespace support

#endif
