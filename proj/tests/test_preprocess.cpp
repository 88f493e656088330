#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include <celltosg/preprocess.hpp>

#include "support.hpp"

using namespace celltosg;
using namespace celltosg::preprocess;

namespace {

Matrix random_counts(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = std::floor(20 * celltosg::detail::uniform01(rng));
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
        m(r, 0) += 1; // no zero rows
    }
    return m;
}

Matrix random_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = celltosg::detail::standard_normal(rng);
    }
    return m;
}

// Cyclic Jacobi eigensolver for a symmetric matrix; columns of `vecs` are eigenvectors.
void jacobi_eigen(Matrix a, Vector& vals, Matrix& vecs) {
    const Eigen::Index n = a.rows();
    vecs = Matrix::Identity(n, n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                off += a(p, q) * a(p, q);
            }
        }
        if (off < 1e-30) {
            break;
        }
        for (Eigen::Index p = 0; p < n; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (Eigen::Index k = 0; k < n; ++k) {
                    const double vkp = vecs(k, p), vkq = vecs(k, q);
                    vecs(k, p) = c * vkp - s * vkq;
                    vecs(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    vals = a.diagonal();
}

// Projector onto the top-k eigenvectors of the sample covariance of `m`.
Matrix oracle_projector(const Matrix& m, std::size_t k, Vector* top_values = nullptr) {
    const Matrix c = m.rowwise() - m.colwise().mean();
    const Matrix cov = c.transpose() * c / static_cast<double>(m.rows() - 1);
    Vector vals;
    Matrix vecs;
    jacobi_eigen(cov, vals, vecs);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(vals.size()));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return vals(a) > vals(b); });
    Matrix basis(m.cols(), static_cast<Eigen::Index>(k));
    if (top_values) {
        top_values->resize(static_cast<Eigen::Index>(k));
    }
    for (std::size_t i = 0; i < k; ++i) {
        basis.col(static_cast<Eigen::Index>(i)) = vecs.col(order[i]);
        if (top_values) {
            (*top_values)(static_cast<Eigen::Index>(i)) = vals(order[i]);
        }
    }
    return basis * basis.transpose();
}

} // namespace

TEST(Normalize, OneTwoThreeRowByHand) {
    Matrix m(1, 3);
    m << 1, 3, 6;
    const Matrix n = normalize(m);
    EXPECT_NEAR(n(0, 0), std::log(1001.0), 1e-12);
    EXPECT_NEAR(n(0, 1), std::log(3001.0), 1e-12);
    EXPECT_NEAR(n(0, 2), std::log(6001.0), 1e-12);
}

TEST(Normalize, SingleNonZeroAtTarget) {
    Matrix m = Matrix::Zero(1, 4);
    m(0, 2) = 10000;
    const Matrix n = normalize(m);
    EXPECT_DOUBLE_EQ(n(0, 2), std::log1p(10000.0));
    EXPECT_EQ(n(0, 0), 0.0);
}

TEST(Normalize, ScaledRowsSumToTarget) {
    Rng rng(1);
    const Matrix m = random_counts(40, 30, rng);
    const Matrix s = scale_rows(m);
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        EXPECT_NEAR(s.row(r).sum(), 10000.0, 1e-3);
    }
}

TEST(Normalize, RejectsZeroRowAndNegativeEntries) {
    Matrix m = Matrix::Ones(3, 2);
    m.row(1).setZero();
    try {
        normalize(m);
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("1"), std::string::npos);
    }
    Matrix neg = Matrix::Ones(2, 2);
    neg(0, 1) = -1;
    EXPECT_THROW(normalize(neg), InputError);
}

TEST(Normalize, MonotoneWithinRow) {
    Rng rng(2);
    const Matrix m = random_counts(10, 8, rng);
    const Matrix n = normalize(m);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index a = 0; a < m.cols(); ++a) {
            for (Eigen::Index b = 0; b < m.cols(); ++b) {
                if (m(r, a) < m(r, b)) {
                    EXPECT_LT(n(r, a), n(r, b));
                }
            }
        }
    }
}

TEST(Hvg, VariancesZeroFiveTwo) {
    // column variances 0, 5, 2 (n-1 denominator)
    Matrix m(2, 3);
    m << 1, 0, 0, 1, std::sqrt(10.0), 2;
    const auto v = column_variances(m);
    EXPECT_NEAR(v(1), 5.0, 1e-12);
    EXPECT_NEAR(v(2), 2.0, 1e-12);
    EXPECT_EQ(select_hvg(m, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(Hvg, ConstantMatrixTieBreaksToLowerIndex) {
    EXPECT_EQ(select_hvg(Matrix::Constant(5, 4, 3.0), 2), (std::vector<std::size_t>{0, 1}));
}

TEST(Hvg, RejectsTooMany) { EXPECT_THROW(select_hvg(Matrix::Zero(3, 2), 3), InputError); }

TEST(Hvg, MatchesBruteForceVarianceRanking) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix m = random_normal(50, 20, rng);
        m.col(3) = m.col(7); // a genuine tie
        std::vector<std::pair<double, std::size_t>> ranked;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double mean = 0;
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                mean += m(r, c);
            }
            mean /= 50;
            double ss = 0;
            for (Eigen::Index r = 0; r < m.rows(); ++r) {
                ss += (m(r, c) - mean) * (m(r, c) - mean);
            }
            ranked.emplace_back(-ss / 49, static_cast<std::size_t>(c));
        }
        std::sort(ranked.begin(), ranked.end());
        std::vector<std::size_t> expect;
        for (int i = 0; i < 5; ++i) {
            expect.push_back(ranked[static_cast<std::size_t>(i)].second);
        }
        std::sort(expect.begin(), expect.end());
        const auto got = select_hvg(m, 5);
        EXPECT_EQ(got, expect);
        EXPECT_TRUE(std::is_sorted(got.begin(), got.end()));
        EXPECT_EQ(std::set<std::size_t>(got.begin(), got.end()).size(), 5u);
    }
}

TEST(Pca, SingleAxisData) {
    Matrix m = Matrix::Zero(6, 3);
    for (Eigen::Index r = 0; r < 6; ++r) {
        m(r, 1) = static_cast<double>(r) - 2.5;
    }
    const auto res = pca(m, 2);
    EXPECT_NEAR(std::abs(res.components(0, 1)), 1.0, 1e-12);
    EXPECT_NEAR(res.explained_variance(1), 0.0, 1e-12);
    EXPECT_EQ(res.completed, 1u);
}

TEST(Pca, SubspaceMatchesJacobiOracle) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const Eigen::Index rows = 5 + static_cast<Eigen::Index>(celltosg::detail::uniform_index(rng, 6));
        const Eigen::Index cols = 2 + static_cast<Eigen::Index>(celltosg::detail::uniform_index(rng, 9));
        const Matrix m = random_normal(rows, cols, rng);
        const std::size_t k = 1 + celltosg::detail::uniform_index(rng, static_cast<std::uint64_t>(std::min(rows - 1, cols)));
        Vector top;
        const Matrix oracle = oracle_projector(m, k, &top);
        const auto res = pca(m, k);
        const Matrix proj = res.components.transpose() * res.components;
        EXPECT_LT((proj - oracle).cwiseAbs().maxCoeff(), 1e-6) << "rows " << rows << " cols " << cols << " k " << k;
        EXPECT_LT((res.explained_variance - top).cwiseAbs().maxCoeff(), 1e-6);
        // score variances equal the eigenvalues
        for (std::size_t i = 0; i < k; ++i) {
            const auto s = res.scores.col(static_cast<Eigen::Index>(i));
            EXPECT_NEAR(s.squaredNorm() / static_cast<double>(rows - 1), top(static_cast<Eigen::Index>(i)), 1e-6);
        }
    }
}

TEST(Pca, FiveByFourKThree) {
    Rng rng(5);
    const Matrix m = random_normal(5, 4, rng);
    const auto res = pca(m, 3);
    EXPECT_LT((res.components.transpose() * res.components - oracle_projector(m, 3)).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((res.components * res.components.transpose() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-10);
    for (Eigen::Index i = 1; i < 3; ++i) {
        EXPECT_LE(res.explained_variance(i), res.explained_variance(i - 1));
    }
}

TEST(Pca, FullRankReconstruction) {
    Rng rng(6);
    const Matrix m = random_normal(8, 4, rng);
    const auto res = pca(m, 4);
    const Matrix back = (res.scores * res.components).rowwise() + res.mean.transpose();
    EXPECT_LT((back - m).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Pca, PowerIterationPathAgreesWithDense) {
    Rng rng(7);
    Matrix m = random_normal(30, 12, rng);
    m.col(0) *= 5;
    m.col(1) *= 3;
    PcaOptions power;
    power.dense_limit = 0;
    const auto a = pca(m, 3);
    const auto b = pca(m, 3, power);
    EXPECT_LT((a.components.transpose() * a.components - b.components.transpose() * b.components).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Pca, RejectsOversizedK) { EXPECT_THROW(pca(Matrix::Zero(3, 5), 4), InputError); }

TEST(Knn, CollinearPoints) {
    Matrix p(3, 1);
    p << 0, 1, 3;
    const auto g = knn_graph(p, 1);
    EXPECT_EQ(g[0], (std::vector<std::size_t>{1}));
    EXPECT_EQ(g[1], (std::vector<std::size_t>{0}));
    EXPECT_EQ(g[2], (std::vector<std::size_t>{1}));
}

TEST(Knn, CompleteWhenKIsRowsMinusOne) {
    Rng rng(8);
    const auto g = knn_graph(random_normal(6, 2, rng), 5);
    for (std::size_t i = 0; i < 6; ++i) {
        std::set<std::size_t> s(g[i].begin(), g[i].end());
        EXPECT_EQ(s.size(), 5u);
        EXPECT_FALSE(s.count(i));
    }
}

TEST(Knn, MatchesPairwiseOracle) {
    Rng rng(9);
    Matrix p = random_normal(30, 4, rng);
    p.row(10) = p.row(3); // duplicate point
    const auto g = knn_graph(p, 3);
    for (Eigen::Index i = 0; i < 30; ++i) {
        std::vector<std::pair<double, std::size_t>> d;
        for (Eigen::Index j = 0; j < 30; ++j) {
            if (j != i) {
                double s = 0;
                for (Eigen::Index c = 0; c < 4; ++c) {
                    s += (p(i, c) - p(j, c)) * (p(i, c) - p(j, c));
                }
                d.emplace_back(s, static_cast<std::size_t>(j));
            }
        }
        std::sort(d.begin(), d.end());
        std::vector<std::size_t> expect{d[0].second, d[1].second, d[2].second};
        EXPECT_EQ(g[static_cast<std::size_t>(i)], expect);
    }
}

TEST(Knn, RejectsKAtLeastRows) { EXPECT_THROW(knn_graph(Matrix::Zero(3, 2), 3), InputError); }

TEST(MajorityVote, MajorityAndTieRule) {
    EXPECT_EQ(majority_vote({"male", "male", "female"}), "male");
    EXPECT_EQ(majority_vote({"male", "female"}), "female");
    EXPECT_FALSE(majority_vote({std::nullopt, std::nullopt}).has_value());
}

namespace {

std::vector<AttributeRecord> attrs_for(std::size_t n) {
    std::vector<AttributeRecord> a(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i].dataset_id = "d";
        a[i].donor_id = "donor" + std::to_string(i % 3);
        a[i].sex_normalized = i % 3 == 2 ? Sex::female : Sex::male;
        a[i].disease_BMG_name = "healthy";
        a[i].matrix_file_path = "part_00000.npy";
        a[i].matrix_row_idx = i;
    }
    return a;
}

} // namespace

TEST(MetaCells, PartitionIsExactAndExpressionIsMemberMean) {
    Rng rng(10);
    const Matrix counts = random_counts(60, 12, rng);
    const auto attrs = attrs_for(60);
    PreprocessConfig cfg;
    cfg.n_hvg = 10;
    cfg.n_pcs = 4;
    cfg.metacell_group_size = 7;
    const auto mcs = build_metacells(counts, attrs, cfg);
    EXPECT_EQ(mcs.size(), 9u); // ceil(60 / 7)
    const Matrix normalized = normalize(counts);
    std::vector<int> seen(60, 0);
    for (const auto& mc : mcs) {
        ASSERT_FALSE(mc.member_rows.empty());
        Vector mean = Vector::Zero(12);
        for (auto r : mc.member_rows) {
            ++seen[r];
            for (Eigen::Index c = 0; c < 12; ++c) {
                mean(c) += normalized(static_cast<Eigen::Index>(r), c);
            }
        }
        mean /= static_cast<double>(mc.member_rows.size());
        EXPECT_LT((mean - mc.expression).cwiseAbs().maxCoeff(), 1e-6);
    }
    for (int s : seen) {
        EXPECT_EQ(s, 1);
    }
}

TEST(MetaCells, DeterministicUnderSeed) {
    Rng rng(11);
    const Matrix counts = random_counts(40, 10, rng);
    const auto attrs = attrs_for(40);
    PreprocessConfig cfg;
    cfg.n_hvg = 8;
    cfg.n_pcs = 3;
    cfg.metacell_group_size = 5;
    const auto a = build_metacells(counts, attrs, cfg);
    const auto b = build_metacells(counts, attrs, cfg);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].member_rows, b[i].member_rows);
    }
}

TEST(MetaCells, OversizedGroupGivesSingleMetaCellWithVotedAttributes) {
    Rng rng(12);
    const Matrix counts = random_counts(3, 4, rng);
    const auto attrs = attrs_for(3); // sex male, male, female
    PreprocessConfig cfg;
    cfg.n_hvg = 4;
    cfg.n_pcs = 2;
    cfg.metacell_group_size = 100;
    const auto mcs = build_metacells(counts, attrs, cfg);
    ASSERT_EQ(mcs.size(), 1u);
    EXPECT_EQ(mcs[0].member_rows.size(), 3u);
    EXPECT_EQ(mcs[0].attributes.sex_normalized, Sex::male);
    EXPECT_EQ(mcs[0].attributes.donor_id, "donor0");
}
