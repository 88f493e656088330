#ifndef CELLTOSG_COMMON_HPP
#define CELLTOSG_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

/**
 * @file common.hpp
 * @brief Shared matrix aliases, error types and seeded random helpers.
 */

namespace celltosg {

/** Row-major single-precision matrix, the on-disk layout of expression shards. */
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/** Column-major double matrix used for all numerical work. */
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/**
 * @brief Invalid user input: schema, configuration or validation failures.
 *
 * The command-line tool maps this to exit code 2.
 */
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** @brief File-system or stream failure. */
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

namespace detail {

// std::uniform_*_distribution output is implementation-defined, so the
// helpers below are written against the raw engine to keep seeded results
// identical across standard libraries.

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
    if (n <= 1) {
        return 0;
    }
    const std::uint64_t limit = Rng::max() - (Rng::max() % n);
    std::uint64_t draw;
    do {
        draw = rng();
    } while (draw >= limit);
    return draw % n;
}

/** Uniform double in [0, 1) from the top 53 bits. */
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/** Standard normal via Box-Muller; one draw per call. */
inline double standard_normal(Rng& rng) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) {
        u1 = uniform01(rng);
    }
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

template <typename T>
void shuffle(std::vector<T>& values, Rng& rng) {
    for (std::size_t i = values.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(values[i - 1], values[j]);
    }
}

/** Sample `count` distinct positions of `values` (count <= size), in draw order. */
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> values, std::size_t count, Rng& rng) {
    // partial Fisher-Yates
    const std::size_t n = values.size();
    for (std::size_t i = 0; i < count && i < n; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform_index(rng, n - i));
        std::swap(values[i], values[j]);
    }
    values.resize(std::min(count, n));
    return values;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/** 64-bit FNV-1a; stable across platforms, unlike std::hash. */
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t basis = 0xcbf29ce484222325ULL) {
    std::uint64_t h = basis;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

} // namespace celltosg

#endif
