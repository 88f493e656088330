#ifndef CELLTOSG_PREPROCESS_HPP
#define CELLTOSG_PREPROCESS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "common.hpp"
#include "shard_store.hpp"

/**
 * @file preprocess.hpp
 * @brief Library-size normalization, HVG selection, PCA, KNN graphs and meta-cell aggregation.
 */

namespace celltosg::preprocess {

/**
 * @brief Parameters for the preprocessing pipeline.
 */
struct PreprocessConfig {
    /** Total count each cell is scaled to before log1p. */
    double target_sum = 10000;

    /** Number of highly variable genes kept for PCA. */
    std::size_t n_hvg = 1500;

    /** Number of principal components. */
    std::size_t n_pcs = 50;

    std::size_t knn_k = 15;

    /** Approximate number of cells per meta-cell. */
    std::size_t metacell_group_size = 75;

    std::uint64_t seed = 0;

    std::size_t kmeans_iterations = 100;

    /**
     * Throws `InputError` unless every size is positive, `n_hvg <= cols` and
     * `n_pcs <= min(rows, n_hvg)`.
     */
    void validate(std::size_t rows, std::size_t cols) const {
        if (!(target_sum > 0) || n_hvg == 0 || n_pcs == 0 || knn_k == 0 || metacell_group_size == 0) {
            throw InputError("preprocess config: all parameters must be positive");
        }
        if (n_hvg > cols) {
            throw InputError("preprocess config: n_hvg (" + std::to_string(n_hvg) + ") exceeds column count (" +
                             std::to_string(cols) + ")");
        }
        if (n_pcs > std::min(rows, n_hvg)) {
            throw InputError("preprocess config: n_pcs (" + std::to_string(n_pcs) + ") exceeds min(rows, n_hvg)");
        }
    }
};

/**
 * Scale each row so that it sums to `target_sum`.
 * Negative entries and all-zero rows are rejected.
 */
inline Matrix scale_rows(const Matrix& counts, double target_sum = 10000) {
    Matrix out = counts;
    for (Eigen::Index r = 0; r < counts.rows(); ++r) {
        double total = 0;
        for (Eigen::Index c = 0; c < counts.cols(); ++c) {
            const double v = counts(r, c);
            if (!(v >= 0)) {
                throw InputError("normalize: row " + std::to_string(r) + " has a negative or non-finite entry");
            }
            total += v;
        }
        if (total <= 0) {
            throw InputError("normalize: row " + std::to_string(r) + " sums to zero");
        }
        out.row(r) *= target_sum / total;
    }
    return out;
}

/** Library-size normalization to `target_sum` followed by elementwise log1p. */
inline Matrix normalize(const Matrix& counts, double target_sum = 10000) {
    Matrix out = scale_rows(counts, target_sum);
    out = out.unaryExpr([](double v) { return std::log1p(v); });
    return out;
}

/** Per-column sample variance (denominator n - 1; zero for a single row). */
inline Vector column_variances(const Matrix& m) {
    const auto n = m.rows();
    Vector var = Vector::Zero(m.cols());
    if (n < 2) {
        return var;
    }
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double mean = m.col(c).mean();
        var(c) = (m.col(c).array() - mean).square().sum() / static_cast<double>(n - 1);
    }
    return var;
}

/**
 * The `n` columns with the largest sample variance, lower index winning ties,
 * returned in ascending order.
 */
inline std::vector<std::size_t> select_hvg(const Matrix& m, std::size_t n) {
    if (n > static_cast<std::size_t>(m.cols())) {
        throw InputError("select_hvg: n (" + std::to_string(n) + ") exceeds column count (" + std::to_string(m.cols()) + ")");
    }
    const Vector var = column_variances(m);
    std::vector<std::size_t> order(static_cast<std::size_t>(m.cols()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return var(static_cast<Eigen::Index>(a)) > var(static_cast<Eigen::Index>(b));
    });
    order.resize(n);
    std::sort(order.begin(), order.end());
    return order;
}

inline Matrix select_columns(const Matrix& m, const std::vector<std::size_t>& cols) {
    Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) {
        out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(cols[i]));
    }
    return out;
}

struct PcaOptions {
    /** Column count up to which the covariance is eigendecomposed directly. */
    std::size_t dense_limit = 2000;

    std::size_t max_power_iterations = 2000;
    double power_tolerance = 1e-12;
    std::uint64_t seed = 0;
};

/**
 * @brief Result of `pca()`.
 */
struct PcaResult {
    /** k x cols, orthonormal rows. */
    Matrix components;

    /** rows x k, centered data projected onto the components. */
    Matrix scores;

    /** Variance along each component, non-increasing. */
    Vector explained_variance;

    Vector mean;

    /**
     * Number of trailing components that carry no variance because `k`
     * exceeds the rank of the centered data. These are still orthonormal but
     * otherwise arbitrary.
     */
    std::size_t completed = 0;
};

namespace detail {

// Fix the sign so the largest-magnitude entry is positive.
inline void canonical_sign(Eigen::Ref<Vector> v) {
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) {
        v = -v;
    }
}

inline Matrix pca_dense(const Matrix& centered, std::size_t k, Vector& values, double denom) {
    const Matrix cov = centered.transpose() * centered / denom;
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("pca: eigendecomposition failed");
    }
    const auto p = cov.cols();
    Matrix comps(static_cast<Eigen::Index>(k), p);
    values.resize(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < k; ++i) {
        // eigenvalues are ascending
        const auto idx = p - 1 - static_cast<Eigen::Index>(i);
        Vector v = solver.eigenvectors().col(idx);
        canonical_sign(v);
        comps.row(static_cast<Eigen::Index>(i)) = v.transpose();
        values(static_cast<Eigen::Index>(i)) = std::max(0.0, solver.eigenvalues()(idx));
    }
    return comps;
}

inline Matrix pca_power(const Matrix& centered, std::size_t k, Vector& values, double denom, const PcaOptions& opt) {
    const auto p = centered.cols();
    Matrix comps(static_cast<Eigen::Index>(k), p);
    values.resize(static_cast<Eigen::Index>(k));
    Rng rng(opt.seed);

    auto orthogonalize = [&](Vector& v, std::size_t upto) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < upto; ++j) {
                const auto row = comps.row(static_cast<Eigen::Index>(j)).transpose();
                v -= row.dot(v) * row;
            }
        }
    };

    for (std::size_t i = 0; i < k; ++i) {
        Vector v(p);
        for (Eigen::Index j = 0; j < p; ++j) {
            v(j) = celltosg::detail::standard_normal(rng);
        }
        orthogonalize(v, i);
        v.normalize();

        double lambda = 0;
        for (std::size_t it = 0; it < opt.max_power_iterations; ++it) {
            Vector w = centered.transpose() * (centered * v) / denom;
            orthogonalize(w, i);
            const double norm = w.norm();
            if (norm <= std::numeric_limits<double>::min()) {
                // no variance left in the orthogonal complement; keep v as a completion
                lambda = 0;
                break;
            }
            w /= norm;
            const double change = std::min((w - v).norm(), (w + v).norm());
            v = w;
            lambda = norm;
            if (change < opt.power_tolerance) {
                break;
            }
        }
        canonical_sign(v);
        comps.row(static_cast<Eigen::Index>(i)) = v.transpose();
        values(static_cast<Eigen::Index>(i)) = (centered * v).squaredNorm() / denom;
        (void)lambda;
    }
    return comps;
}

} // namespace detail

/**
 * Principal component analysis of `m` (rows are observations).
 *
 * The data are centered internally. Up to `opt.dense_limit` columns the
 * covariance matrix is eigendecomposed; above that, components are found by
 * power iteration with deflation. Requires `k <= min(rows, cols)`.
 */
inline PcaResult pca(const Matrix& m, std::size_t k, const PcaOptions& opt = {}) {
    const auto rows = static_cast<std::size_t>(m.rows());
    const auto cols = static_cast<std::size_t>(m.cols());
    if (k == 0 || k > std::min(rows, cols)) {
        throw InputError("pca: k must be in [1, min(rows, cols)]");
    }

    PcaResult res;
    res.mean = m.colwise().mean().transpose();
    const Matrix centered = m.rowwise() - res.mean.transpose();
    const double denom = rows > 1 ? static_cast<double>(rows - 1) : 1.0;

    if (cols <= opt.dense_limit) {
        res.components = detail::pca_dense(centered, k, res.explained_variance, denom);
    } else {
        res.components = detail::pca_power(centered, k, res.explained_variance, denom, opt);
    }
    res.scores = centered * res.components.transpose();

    const double top = res.explained_variance.size() ? res.explained_variance(0) : 0.0;
    const double tiny = 1e-12 * std::max(1.0, top);
    for (Eigen::Index i = 0; i < res.explained_variance.size(); ++i) {
        if (res.explained_variance(i) <= tiny) {
            ++res.completed;
        }
    }
    return res;
}

/**
 * Directed k-nearest-neighbor lists by Euclidean distance between rows of
 * `points`. Self is excluded and distance ties go to the lower index.
 * Each list is ordered from nearest to farthest.
 */
inline std::vector<std::vector<std::size_t>> knn_graph(const Matrix& points, std::size_t k_neighbors) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (k_neighbors >= n) {
        throw InputError("knn_graph: k_neighbors (" + std::to_string(k_neighbors) + ") must be below the point count (" +
                         std::to_string(n) + ")");
    }
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t i = 0; i < n; ++i) {
        dist.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                dist.emplace_back((points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).squaredNorm(), j);
            }
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_neighbors), dist.end());
        out[i].reserve(k_neighbors);
        for (std::size_t j = 0; j < k_neighbors; ++j) {
            out[i].push_back(dist[j].second);
        }
    }
    return out;
}

/**
 * Seeded k-means (k-means++ seeding, Lloyd iterations). Returns a cluster id
 * per row; clusters may end up empty.
 */
inline std::vector<std::size_t> kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t iterations = 100) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (k == 0 || n == 0) {
        throw InputError("kmeans: need at least one point and one cluster");
    }
    k = std::min(k, n);
    Rng rng(seed);

    Matrix centers(static_cast<Eigen::Index>(k), points.cols());
    centers.row(0) = points.row(static_cast<Eigen::Index>(celltosg::detail::uniform_index(rng, n)));
    Vector best = Vector::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::infinity());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = (points.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c - 1))).squaredNorm();
            best(static_cast<Eigen::Index>(i)) = std::min(best(static_cast<Eigen::Index>(i)), d);
            total += best(static_cast<Eigen::Index>(i));
        }
        std::size_t pick = 0;
        if (total > 0) {
            double target = celltosg::detail::uniform01(rng) * total;
            for (pick = 0; pick + 1 < n; ++pick) {
                target -= best(static_cast<Eigen::Index>(pick));
                if (target < 0) {
                    break;
                }
            }
        } else {
            pick = static_cast<std::size_t>(celltosg::detail::uniform_index(rng, n));
        }
        centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
    }

    std::vector<std::size_t> assign(n, k);
    for (std::size_t it = 0; it < iterations; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t arg = 0;
            double bestd = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = (points.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm();
                if (d < bestd) {
                    bestd = d;
                    arg = c;
                }
            }
            if (assign[i] != arg) {
                assign[i] = arg;
                changed = true;
            }
        }
        if (!changed) {
            break;
        }
        Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), points.cols());
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums.row(static_cast<Eigen::Index>(assign[i])) += points.row(static_cast<Eigen::Index>(i));
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c]) {
                centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
            }
        }
    }
    return assign;
}

/**
 * Most frequent present value; ties go to the lexicographically smallest.
 * Returns `std::nullopt` when no value is present.
 */
inline std::optional<std::string> majority_vote(const std::vector<std::optional<std::string>>& values) {
    std::map<std::string, std::size_t> counts;
    for (const auto& v : values) {
        if (v && !v->empty()) {
            ++counts[*v];
        }
    }
    std::optional<std::string> winner;
    std::size_t best = 0;
    // std::map iterates in lexicographic order, so strict '>' keeps the smallest on ties
    for (const auto& [value, count] : counts) {
        if (count > best) {
            best = count;
            winner = value;
        }
    }
    return winner;
}

struct MetaCell {
    /** Global row ids of the member cells. */
    std::vector<std::size_t> member_rows;

    /** Mean of the members' normalized expression. */
    Vector expression;

    /** Per-field majority vote over members; matrix pointers are left for the writer to fill. */
    AttributeRecord attributes;
};

/** Majority-voted attributes over `members` (positions into `attrs`). */
inline AttributeRecord vote_attributes(std::span<const AttributeRecord> attrs, std::span<const std::size_t> members) {
    AttributeRecord out;
    for (const auto& name : AttributeRecord::names()) {
        if (name == "matrix_file_path" || name == "matrix_row_idx") {
            continue;
        }
        std::vector<std::optional<std::string>> values;
        values.reserve(members.size());
        for (std::size_t m : members) {
            values.push_back(attrs[m].get(name));
        }
        if (auto v = majority_vote(values)) {
            out.set(name, *v);
        }
    }
    return out;
}

/**
 * Group cells into meta-cells.
 *
 * Counts are normalized, reduced to the configured HVGs and principal
 * components, and partitioned by seeded k-means into
 * `ceil(rows / metacell_group_size)` groups. Every row lands in exactly one
 * meta-cell. Meta-cells are ordered by their smallest member.
 *
 * @param counts Raw counts, one cell per row, aligned with `attrs`.
 * @param row_ids Global ids reported in `member_rows`; defaults to 0..rows-1.
 */
inline std::vector<MetaCell> build_metacells(const Matrix& counts, std::span<const AttributeRecord> attrs,
                                             const PreprocessConfig& cfg,
                                             std::span<const std::size_t> row_ids = {}) {
    const auto rows = static_cast<std::size_t>(counts.rows());
    if (attrs.size() != rows) {
        throw InputError("build_metacells: " + std::to_string(attrs.size()) + " attribute records for " +
                         std::to_string(rows) + " rows");
    }
    if (!row_ids.empty() && row_ids.size() != rows) {
        throw InputError("build_metacells: row_ids length mismatch");
    }
    cfg.validate(rows, static_cast<std::size_t>(counts.cols()));

    const Matrix normalized = normalize(counts, cfg.target_sum);

    std::vector<std::size_t> assign(rows, 0);
    const std::size_t groups = (rows + cfg.metacell_group_size - 1) / cfg.metacell_group_size;
    if (groups > 1) {
        const auto hvg = select_hvg(normalized, cfg.n_hvg);
        PcaOptions opt;
        opt.seed = cfg.seed;
        const auto reduced = pca(select_columns(normalized, hvg), cfg.n_pcs, opt);
        assign = kmeans(reduced.scores, groups, cfg.seed, cfg.kmeans_iterations);
    }

    std::map<std::size_t, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < rows; ++i) {
        members[assign[i]].push_back(i);
    }
    std::vector<std::vector<std::size_t>> ordered;
    for (auto& [cluster, rowsin] : members) {
        ordered.push_back(std::move(rowsin));
    }
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });

    std::vector<MetaCell> out;
    out.reserve(ordered.size());
    for (const auto& group : ordered) {
        MetaCell mc;
        mc.expression = Vector::Zero(counts.cols());
        for (std::size_t r : group) {
            mc.expression += normalized.row(static_cast<Eigen::Index>(r)).transpose();
            mc.member_rows.push_back(row_ids.empty() ? r : row_ids[r]);
        }
        mc.expression /= static_cast<double>(group.size());
        mc.attributes = vote_attributes(attrs, group);
        out.push_back(std::move(mc));
    }
    return out;
}

} // namespace celltosg::preprocess

#endif
