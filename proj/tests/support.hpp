#ifndef CELLTOSG_TESTS_SUPPORT_HPP
#define CELLTOSG_TESTS_SUPPORT_HPP

#include <filesystem>
#include <string>
#include <vector>

#include <celltosg/celltosg.hpp>

namespace support {

using namespace celltosg;

/** Fresh empty directory under the system temp dir. */
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("celltosg_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/** Planted two-block PPI graph with one measured transcript per protein. */
struct Planted {
    TosgGraph graph;
    Matrix features; // samples x entities
    std::vector<int> block;
};

/**
 * `n` proteins split into two equal blocks; each unordered pair is an edge
 * with probability `p_in` (same block) or `p_out`. Per-sample transcript
 * features are `z + alpha * A z + offset(block)` with `z` standard normal,
 * so pairs that interact co-vary across samples.
 */
inline Planted planted_two_block(std::size_t n, double p_in, double p_out, std::size_t samples, double alpha, double offset,
                                 std::uint64_t seed) {
    Rng rng(seed);
    Planted pl;
    std::vector<MappingRow> mapping;
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = std::to_string(i);
        mapping.push_back({"f" + id, "t" + id, "p" + id, 0});
        pl.block.push_back(i < n / 2 ? 0 : 1);
    }
    std::vector<PpiRow> ppi;
    std::vector<std::vector<std::size_t>> adj(n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = a + 1; b < n; ++b) {
            const double p = pl.block[a] == pl.block[b] ? p_in : p_out;
            if (celltosg::detail::uniform01(rng) < p) {
                ppi.push_back({"p" + std::to_string(a), "p" + std::to_string(b), 0});
                adj[a].push_back(b);
                adj[b].push_back(a);
            }
        }
    }
    pl.graph = build_graph(mapping, ppi);
    pl.features = Matrix::Zero(static_cast<Eigen::Index>(samples), static_cast<Eigen::Index>(2 * n));
    for (std::size_t s = 0; s < samples; ++s) {
        Vector z(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            z(i) = celltosg::detail::standard_normal(rng);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double v = z(static_cast<Eigen::Index>(i)) + (pl.block[i] ? offset : -offset);
            for (auto j : adj[i]) {
                v += alpha * z(static_cast<Eigen::Index>(j));
            }
            pl.features(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(i)) = v;
        }
    }
    return pl;
}

} // namespace support

#endif
