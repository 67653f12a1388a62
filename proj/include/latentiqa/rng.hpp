#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace liqa {

/// The only source of randomness in the library. It is always passed
/// explicitly; nothing draws from ambient global state.
using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a list of salts
/// (cell index, image index, ...). Stable across runs.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> salts = {}) {
    std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
    for (std::uint64_t s : salts) {
        h ^= s + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        h *= 0xbf58476d1ce4e5b9ULL;
        h ^= h >> 31;
    }
    std::seed_seq mixed{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                        static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(salts.size())};
    return Rng(mixed);
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return m;
}

} // namespace liqa
